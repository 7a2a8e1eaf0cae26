//! One function per subcommand, plus the pieces they share. Library callers
//! (and the acceptance suite) use the in-memory variants; the `cmd_*` wrappers
//! add file handling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use weend::baseline::{orchestrate, OrchestrationStats};
use weend::datagen::{
    build_targets, generate_corpus, segment_conversation, simulate_set, Conversation, Tokenizer, Vocab,
};
use weend::decode::{beam_decode, detokenize, greedy_decode, DecodeRecord};
use weend::formats::{
    load_features, parse_ctm, parse_jsonl, parse_rttm, read_manifest, save_features, write_jsonl, ManifestEntry,
};
use weend::metrics::{align, modified_wder, wder, SpeakerMapping, WderReport, WerReport};
use weend::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use weend::numerics::Tensor2;
use weend::train::{train, Example, Phase, TrainStats};

use crate::config::{
    segmented_manifest_name, test_manifest_name, EvalSection, RunConfig, FEATURE_DIR, TRAIN_MANIFEST, VOCAB_FILE,
};
use crate::UsageError;

/// Refuses to overwrite an existing file unless forced.
pub fn check_output_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(UsageError(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// A manifest with its feature matrices loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
    pub features: Vec<Tensor2>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let features = entries
            .iter()
            .map(|e| {
                let p = base.join(&e.features);
                let f = load_features(&p).with_context(|| format!("loading {}", p.display()))?;
                if f.rows() != e.frames {
                    bail!(weend::Error::Format(format!(
                        "{}: manifest says {} frames, file has {}",
                        e.id,
                        e.frames,
                        f.rows()
                    )));
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self { name, entries, features })
    }

    pub fn from_conversations(name: impl Into<String>, convs: &[Conversation], max_speakers: usize) -> Result<Self> {
        let entries = convs
            .iter()
            .map(|c| ManifestEntry::from_conversation(c, feature_path(&c.id), max_speakers))
            .collect::<weend::Result<Vec<_>>>()?;
        Ok(Self {
            name: name.into(),
            entries,
            features: convs.iter().map(|c| c.features.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn examples(&self, vocab: &Vocab) -> Result<Vec<Example>> {
        self.entries
            .iter()
            .zip(&self.features)
            .map(|(e, f)| {
                let (wordpieces, speakers) =
                    build_targets(&e.timed_words(), &e.speaker_ids(), vocab, Tokenizer::WordLevel)
                        .with_context(|| format!("targets for {}", e.id))?;
                Ok(Example {
                    id: e.id.clone(),
                    features: f.clone(),
                    wordpieces,
                    speakers,
                })
            })
            .collect()
    }
}

fn feature_path(id: &str) -> String {
    format!("{FEATURE_DIR}/{id}.feat")
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Vocab::from_text(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn check_vocab(vocab: &Vocab, model: &ModelConfig) -> Result<()> {
    if vocab.len() != model.vocab_size {
        bail!(weend::Error::Dimension {
            op: "vocabulary vs model.vocab_size",
            left: (vocab.len(), 1),
            right: (model.vocab_size, 1),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub train_conversations: usize,
    /// Manifest file name and conversation count of every held-out set.
    pub test_sets: Vec<(String, usize)>,
    pub train_speakers: Vec<String>,
    pub test_speakers: Vec<String>,
}

/// Writes `vocab.txt`, `train.jsonl`, one `test_{M}spk.jsonl` per speaker
/// count, their segmented variants, `speakers.json` and the feature files.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, force: bool) -> Result<SimulateSummary> {
    cfg.validate()?;
    if out.exists() {
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            bail!(UsageError(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
        let feats = out.join(FEATURE_DIR);
        if feats.exists() {
            fs::remove_dir_all(&feats).with_context(|| format!("clearing {}", feats.display()))?;
        }
    }
    fs::create_dir_all(out.join(FEATURE_DIR)).with_context(|| format!("creating {}", out.display()))?;
    let sim = &cfg.data.simulator;
    let corpus = generate_corpus(sim)?;
    info!(
        "simulated {} training conversations from {} speakers",
        corpus.train.len(),
        corpus.train_pool.speakers.len()
    );
    write_file(&out.join(VOCAB_FILE), corpus.vocab.to_text())?;

    let mut written = BTreeSet::new();
    let mut write_set = |name: &str, convs: &[Conversation]| -> Result<()> {
        let mut entries = Vec::with_capacity(convs.len());
        for c in convs {
            let rel = feature_path(&c.id);
            if written.insert(c.id.clone()) {
                save_features(&c.features, &out.join(&rel))?;
            }
            entries.push(ManifestEntry::from_conversation(c, rel, cfg.model.max_speakers)?);
        }
        write_file(&out.join(name), write_jsonl(&entries)?)
    };
    write_set(TRAIN_MANIFEST, &corpus.train)?;

    let mut test_sets = Vec::new();
    for &m in &cfg.data.test_speaker_counts {
        if m > corpus.test_pool.speakers.len() {
            bail!(UsageError(format!(
                "test sets with {m} speakers need at least {m} test speakers, have {}",
                corpus.test_pool.speakers.len()
            )));
        }
        let convs = simulate_set(
            &corpus.test_pool,
            "test",
            m,
            cfg.data.test_utterances_per_speaker,
            sim.test_conversations,
            &sim.gaps,
            sim.synth.frame_step,
            test_set_seed(sim.seed, m),
        )?;
        let name = test_manifest_name(m);
        write_set(&name, &convs)?;
        test_sets.push((name, convs.len()));
        for &len in &cfg.data.segment_lengths {
            let mut segs = Vec::new();
            for c in &convs {
                segs.extend(segment_conversation(c, len)?);
            }
            let name = segmented_manifest_name(m, len);
            write_set(&name, &segs)?;
            test_sets.push((name, segs.len()));
        }
    }
    let summary = SimulateSummary {
        train_conversations: corpus.train.len(),
        test_sets,
        train_speakers: corpus.train_pool.speakers.clone(),
        test_speakers: corpus.test_pool.speakers.clone(),
    };
    write_file(&out.join("speakers.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Seed of the held-out set with `m` speakers.
pub fn test_set_seed(seed: u64, m: usize) -> u64 {
    seed ^ (0x7e57 << 40) ^ m as u64
}

fn log_losses(every: usize, label: &'static str) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if every > 0 && step % every == 0 {
            info!("{label} step {step}: loss {loss:.4}");
        }
    }
}

/// Fresh model trained on the wordpiece loss.
pub fn train_asr_model(cfg: &RunConfig, data: &[Example]) -> Result<(ModelParams, TrainStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut params = ModelParams::init(&cfg.model, &mut rng)?;
    let stats = train(
        &mut params,
        data,
        &cfg.train.trainer(cfg.train.asr_steps),
        Phase::Asr,
        log_losses(cfg.train.log_every, "asr"),
    )?;
    Ok((params, stats))
}

fn write_losses(path: &Path, stats: &TrainStats) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in stats.losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    write_file(path, s)
}

fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    checkpoint.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// SHA-256 of the ASR-side tensors before and after training.
    pub asr_hash_before: String,
    pub asr_hash_after: String,
}

impl TrainSummary {
    fn new(stats: &TrainStats, before: String, after: String) -> Self {
        Self {
            steps: stats.losses.len(),
            first_loss: stats.losses.first().copied(),
            final_loss: stats.final_loss(),
            asr_hash_before: before,
            asr_hash_after: after,
        }
    }
}

/// Hash of every ASR encoder, predictor and ASR joint value, in parameter order.
pub fn asr_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for (name, group, p) in params.named_params() {
        if group.is_asr() {
            h.update(name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

pub fn cmd_train_asr(cfg: &RunConfig, manifest: &Path, vocab: &Path, out: &Path, force: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    check_output_file(out, force)?;
    let vocab = load_vocab(vocab)?;
    check_vocab(&vocab, &cfg.model)?;
    let data = Dataset::load(manifest)?.examples(&vocab)?;
    info!("training ASR on {} utterances for {} steps", data.len(), cfg.train.asr_steps);
    let (params, stats) = train_asr_model(cfg, &data)?;
    save_checkpoint(&params, out)?;
    write_losses(&loss_log_path(out), &stats)?;
    let h = asr_hash(&params);
    Ok(TrainSummary::new(&stats, h.clone(), h))
}

/// Checks that a checkpoint can serve `want`: every shape must agree except
/// the tap layer, which only affects the auxiliary network.
pub fn check_compatible(have: &ModelConfig, want: &ModelConfig) -> Result<()> {
    let mut h = have.clone();
    h.tap_layer = want.tap_layer;
    if &h != want {
        bail!(weend::Error::Invalid(format!(
            "checkpoint shapes {have:?} do not match the configured model {want:?}"
        )));
    }
    Ok(())
}

/// Trains the auxiliary network on top of `params`. When `fresh_aux` is set
/// (or the configured tap differs from the checkpoint's) the auxiliary network
/// is reinitialized from the training seed first.
pub fn train_aux_model(
    cfg: &RunConfig,
    params: &mut ModelParams,
    data: &[Example],
    fresh_aux: bool,
) -> Result<TrainSummary> {
    check_compatible(&params.config, &cfg.model)?;
    if fresh_aux || params.config.tap_layer != cfg.model.tap_layer {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xa0c5);
        params.reinit_aux(cfg.model.tap_layer, &mut rng)?;
    }
    let before = asr_hash(params);
    let phase = if cfg.train.freeze_asr { Phase::Aux } else { Phase::Joint };
    if !cfg.train.freeze_asr {
        params.freeze_asr(false);
    }
    let stats = train(
        params,
        data,
        &cfg.train.trainer(cfg.train.aux_steps),
        phase,
        log_losses(cfg.train.log_every, "aux"),
    )?;
    let after = asr_hash(params);
    if cfg.train.freeze_asr && before != after {
        bail!(weend::Error::Numeric("frozen ASR tensors changed during auxiliary training".into()));
    }
    Ok(TrainSummary::new(&stats, before, after))
}

pub fn cmd_train_aux(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    vocab: &Path,
    out: &Path,
    force: bool,
) -> Result<TrainSummary> {
    cfg.validate()?;
    check_output_file(out, force)?;
    let mut params = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let vocab = load_vocab(vocab)?;
    check_vocab(&vocab, &cfg.model)?;
    let data = Dataset::load(manifest)?.examples(&vocab)?;
    info!("training speaker network on {} utterances for {} steps", data.len(), cfg.train.aux_steps);
    let summary = train_aux_model(cfg, &mut params, &data, false)?;
    save_checkpoint(&params, out)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub utterances: usize,
    pub words: usize,
    /// Words whose wordpieces were given different speakers.
    pub speaker_conflicts: usize,
}

pub fn decode_dataset(
    params: &ModelParams,
    data: &Dataset,
    vocab: &Vocab,
    eval: &EvalSection,
) -> Result<(Vec<DecodeRecord>, DecodeSummary)> {
    check_vocab(vocab, &params.config)?;
    let mut summary = DecodeSummary::default();
    let mut records = Vec::with_capacity(data.len());
    for (i, (e, f)) in data.entries.iter().zip(&data.features).enumerate() {
        let hyp = if eval.beam_size <= 1 {
            greedy_decode(params, f, eval.max_emissions)?
        } else {
            beam_decode(params, f, eval.beam_size, eval.max_emissions)?.swap_remove(0)
        };
        let t = detokenize(&hyp, vocab)?;
        summary.utterances += 1;
        summary.words += t.words.len();
        summary.speaker_conflicts += t.speaker_conflicts;
        records.push(DecodeRecord {
            id: e.id.clone(),
            words: t.words,
        });
        if (i + 1) % 100 == 0 {
            info!("decoded {}/{}", i + 1, data.len());
        }
    }
    Ok((records, summary))
}

pub fn cmd_decode(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    vocab: &Path,
    out: &Path,
    force: bool,
) -> Result<DecodeSummary> {
    cfg.validate()?;
    check_output_file(out, force)?;
    let params = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let vocab = load_vocab(vocab)?;
    let data = Dataset::load(manifest)?;
    let (records, summary) = decode_dataset(&params, &data, &vocab, &cfg.eval)?;
    write_file(out, write_jsonl(&records)?)?;
    Ok(summary)
}

pub fn cmd_orchestrate(ctm: &Path, rttm: &Path, frame_step: f64, out: &Path, force: bool) -> Result<OrchestrationStats> {
    check_output_file(out, force)?;
    let words = parse_ctm(&fs::read_to_string(ctm).with_context(|| format!("reading {}", ctm.display()))?)?;
    let segs = parse_rttm(&fs::read_to_string(rttm).with_context(|| format!("reading {}", rttm.display()))?)?;
    let (records, stats) = orchestrate(&words, &segs, frame_step)?;
    write_file(out, write_jsonl(&records)?)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub ref_speakers: usize,
    pub ref_words: usize,
    pub hyp_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Canonical ids compared directly.
    pub wder: WderReport,
    pub modified_wder: WderReport,
    /// Under the best hypothesis-to-reference speaker map.
    pub wder_permuted: WderReport,
    pub modified_wder_permuted: WderReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub utterances: usize,
    pub wer: WerReport,
    pub wder: WderReport,
    pub modified_wder: WderReport,
    pub wder_permuted: WderReport,
    pub modified_wder_permuted: WderReport,
}

impl ScoreSummary {
    /// WDER under `mapping`.
    pub fn wder_for(&self, mapping: SpeakerMapping) -> &WderReport {
        match mapping {
            SpeakerMapping::Identity => &self.wder,
            SpeakerMapping::BestPermutation => &self.wder_permuted,
        }
    }

    /// Count-weighted fold of per-utterance scores.
    pub fn fold<'a>(scores: impl IntoIterator<Item = &'a UtteranceScore> + Clone) -> Result<Self> {
        let (mut n, mut r, mut s, mut d, mut i) = (0, 0, 0, 0, 0);
        for u in scores.clone() {
            n += 1;
            r += u.ref_words;
            s += u.substitutions;
            d += u.deletions;
            i += u.insertions;
        }
        Ok(Self {
            utterances: n,
            wer: WerReport::from_counts(r, s, d, i)?,
            wder: WderReport::aggregate(scores.clone().into_iter().map(|u| &u.wder)),
            modified_wder: WderReport::aggregate(scores.clone().into_iter().map(|u| &u.modified_wder)),
            wder_permuted: WderReport::aggregate(scores.clone().into_iter().map(|u| &u.wder_permuted)),
            modified_wder_permuted: WderReport::aggregate(scores.into_iter().map(|u| &u.modified_wder_permuted)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub ref_speakers: usize,
    pub summary: ScoreSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Which mapping the headline numbers use; both are always reported.
    pub mapping: SpeakerMapping,
    pub aggregate: ScoreSummary,
    /// One row per distinct reference speaker count, ascending.
    pub by_speaker_count: Vec<BucketRow>,
    pub utterances: Vec<UtteranceScore>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "bucket,utterances,ref_words,wer,sub,del,ins,wder,modified_wder,wder_permuted,modified_wder_permuted\n",
        );
        let row = |label: String, m: &ScoreSummary| {
            format!(
                "{label},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m.utterances,
                m.wer.ref_words,
                m.wer.wer,
                m.wer.sub_rate,
                m.wer.del_rate,
                m.wer.ins_rate,
                m.wder.wder,
                m.modified_wder.wder,
                m.wder_permuted.wder,
                m.modified_wder_permuted.wder
            )
        };
        s.push_str(&row("all".into(), &self.aggregate));
        for b in &self.by_speaker_count {
            s.push_str(&row(format!("{}spk", b.ref_speakers), &b.summary));
        }
        s
    }
}

/// Scores decode records against reference manifest entries. The two id
/// sets must be equal.
pub fn evaluate(hyps: &[DecodeRecord], refs: &[ManifestEntry], mapping: SpeakerMapping) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &DecodeRecord> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    let ref_ids: BTreeSet<&str> = refs.iter().map(|r| r.id.as_str()).collect();
    let missing: Vec<&str> = ref_ids.iter().filter(|id| !by_id.contains_key(*id)).copied().collect();
    let extra: Vec<&str> = by_id.keys().filter(|id| !ref_ids.contains(*id)).copied().collect();
    if !missing.is_empty() || !extra.is_empty() || by_id.len() != hyps.len() {
        bail!(weend::Error::Invalid(format!(
            "decode output and reference disagree: missing {missing:?}, unexpected {extra:?}, {} duplicate records",
            hyps.len() - by_id.len()
        )));
    }
    let mut utterances = Vec::with_capacity(refs.len());
    for r in refs {
        let h = by_id[r.id.as_str()];
        let ref_text: Vec<&str> = r.words.iter().map(|w| w.text.as_str()).collect();
        let hyp_text: Vec<&str> = h.words.iter().map(|w| w.word.as_str()).collect();
        let al = align(&ref_text, &hyp_text);
        let k = al.counts();
        let rs = r.speaker_ids();
        let hs: Vec<usize> = h.words.iter().map(|w| w.speaker).collect();
        let timed = r.timed_words();
        utterances.push(UtteranceScore {
            id: r.id.clone(),
            ref_speakers: r.distinct_speakers(),
            ref_words: ref_text.len(),
            hyp_words: hyp_text.len(),
            substitutions: k.s,
            deletions: k.d,
            insertions: k.i,
            wder: wder(&al, &rs, &hs, SpeakerMapping::Identity)?,
            modified_wder: modified_wder(&al, &timed, &rs, &hs, SpeakerMapping::Identity)?,
            wder_permuted: wder(&al, &rs, &hs, SpeakerMapping::BestPermutation)?,
            modified_wder_permuted: modified_wder(&al, &timed, &rs, &hs, SpeakerMapping::BestPermutation)?,
        });
    }
    let aggregate = ScoreSummary::fold(&utterances)?;
    let counts: BTreeSet<usize> = utterances.iter().map(|u| u.ref_speakers).collect();
    let by_speaker_count = counts
        .into_iter()
        .map(|n| {
            Ok(BucketRow {
                ref_speakers: n,
                summary: ScoreSummary::fold(utterances.iter().filter(|u| u.ref_speakers == n))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mapping,
        aggregate,
        by_speaker_count,
        utterances,
    })
}

fn csv_path(report: &Path) -> PathBuf {
    report.with_extension("csv")
}

/// Writes the JSON report to `out` and the bucket table next to it as CSV.
pub fn cmd_eval(cfg: &RunConfig, decoded: &Path, manifest: &Path, out: &Path, force: bool) -> Result<EvalReport> {
    check_output_file(out, force)?;
    let hyps: Vec<DecodeRecord> =
        parse_jsonl(&fs::read_to_string(decoded).with_context(|| format!("reading {}", decoded.display()))?)
            .with_context(|| format!("parsing {}", decoded.display()))?;
    let refs = read_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let report = evaluate(&hyps, &refs, cfg.eval.mapping)?;
    write_file(out, serde_json::to_string_pretty(&report)? + "\n")?;
    write_file(&csv_path(out), report.to_csv())?;
    Ok(report)
}

/// Resolves `first`, `middle`, `last` or a 1-based index against the encoder depth.
pub fn resolve_tap(spec: &str, asr_layers: usize) -> Result<usize> {
    let tap = match spec.trim() {
        "first" => 1,
        "middle" => asr_layers.div_ceil(2),
        "last" => asr_layers,
        s => s
            .parse::<usize>()
            .map_err(|_| UsageError(format!("tap layer {s:?} is not first, middle, last or a number")))?,
    };
    if tap < 1 || tap > asr_layers {
        bail!(UsageError(format!("tap layer {tap} outside 1..={asr_layers}")));
    }
    Ok(tap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapRow {
    pub tap_layer: usize,
    pub final_loss: Option<f64>,
    /// WDER per test set, in the report's column order.
    pub wder: Vec<f64>,
    pub wer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub asr_layers: usize,
    pub testsets: Vec<String>,
    pub rows: Vec<TapRow>,
    /// False while runs are outstanding or after a failed run.
    pub complete: bool,
    /// Whether the middle tap scored no worse than both the first and last
    /// taps on every test set; absent unless all three were run.
    pub middle_not_worse: Option<bool>,
    pub observation: String,
}

impl AblationReport {
    fn observe(&mut self) {
        let find = |t: usize| self.rows.iter().find(|r| r.tap_layer == t);
        let l = self.asr_layers;
        self.middle_not_worse = match (find(1), find(l.div_ceil(2)), find(l)) {
            (Some(f), Some(m), Some(z)) if l >= 3 => Some(
                m.wder.iter().zip(&f.wder).zip(&z.wder).all(|((m, f), z)| m <= f && m <= z),
            ),
            _ => None,
        };
        self.observation = match self.middle_not_worse {
            Some(true) => "middle tap WDER <= first and last tap WDER on every test set".into(),
            Some(false) => "middle tap is not the best on every test set".into(),
            None => "first, middle and last taps were not all run".into(),
        };
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| tap |");
        for t in &self.testsets {
            s.push_str(&format!(" {t} WDER |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.testsets.len()));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("| {} |", r.tap_layer));
            for w in &r.wder {
                s.push_str(&format!(" {:.2}% |", 100.0 * w));
            }
            s.push('\n');
        }
        s.push_str(&format!("\n{}\n", self.observation));
        s
    }
}

/// One auxiliary network per tap, all on the same frozen ASR and data, each
/// scored on every test set. `on_row` sees the report after every tap, so a
/// caller can persist partial results.
pub fn ablate_tap(
    cfg: &RunConfig,
    asr: &ModelParams,
    train_data: &[Example],
    tests: &[Dataset],
    vocab: &Vocab,
    taps: &[usize],
    mut on_row: impl FnMut(&AblationReport) -> Result<()>,
) -> Result<AblationReport> {
    if taps.len() < 2 {
        bail!(UsageError("the ablation needs at least two tap layers".into()));
    }
    let mut report = AblationReport {
        asr_layers: asr.config.asr_layers,
        testsets: tests.iter().map(|t| t.name.clone()).collect(),
        rows: Vec::new(),
        complete: false,
        middle_not_worse: None,
        observation: String::new(),
    };
    for &tap in taps {
        let run = || -> Result<TapRow> {
            let mut c = cfg.clone();
            c.model.tap_layer = tap;
            c.train.freeze_asr = true;
            let mut params = asr.clone();
            let summary = train_aux_model(&c, &mut params, train_data, true)?;
            let mut row = TapRow {
                tap_layer: tap,
                final_loss: summary.final_loss,
                wder: Vec::new(),
                wer: Vec::new(),
            };
            for t in tests {
                let (hyps, _) = decode_dataset(&params, t, vocab, &c.eval)?;
                let e = evaluate(&hyps, &t.entries, c.eval.mapping)?;
                row.wder.push(e.aggregate.wder_for(c.eval.mapping).wder);
                row.wer.push(e.aggregate.wer.wer);
            }
            Ok(row)
        };
        match run() {
            Ok(row) => {
                info!("tap {tap}: WDER {:?}", row.wder);
                report.rows.push(row);
                report.observe();
                on_row(&report)?;
            }
            Err(e) => {
                report.observe();
                on_row(&report)?;
                return Err(e.context(format!("ablation run for tap layer {tap}")));
            }
        }
    }
    report.complete = true;
    report.observe();
    if report.middle_not_worse == Some(false) {
        warn!("{}", report.observation);
    }
    on_row(&report)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_ablate_tap(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    tests: &[PathBuf],
    vocab: &Path,
    taps: &[String],
    out: &Path,
    force: bool,
) -> Result<AblationReport> {
    cfg.validate()?;
    check_output_file(out, force)?;
    let asr = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    check_compatible(&asr.config, &cfg.model)?;
    let taps = taps
        .iter()
        .map(|t| resolve_tap(t, cfg.model.asr_layers))
        .collect::<Result<Vec<_>>>()?;
    let vocab = load_vocab(vocab)?;
    let train_data = Dataset::load(manifest)?.examples(&vocab)?;
    let tests = tests.iter().map(|p| Dataset::load(p)).collect::<Result<Vec<_>>>()?;
    let md = out.with_extension("md");
    ablate_tap(cfg, &asr, &train_data, &tests, &vocab, &taps, |r| {
        write_file(out, serde_json::to_string_pretty(r)? + "\n")?;
        write_file(&md, r.to_markdown())
    })
}
