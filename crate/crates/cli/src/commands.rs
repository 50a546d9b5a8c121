use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use dialbt::corpus::{
    self, detokenize, io, prepare, retrieve_respond, synth_generate, tokenize, MonoCorpus, PairedCorpus,
    RetrievalIndex, Vocab,
};
use dialbt::decode::{
    beam_search, diverse_beam_search, fused_decode, mmi_rerank, nucleus_sample, DirectedModel, LmModel, Strategy,
};
use dialbt::evalsuite::{self, MetricsReport, CSV_HEADER};
use dialbt::model::{Direction, Discriminator, LanguageModel, Seq2SeqPair};
use dialbt::numcore::checkpoint::Checkpoint;
use dialbt::trainer::{self, PhaseReport};
use dialbt::{gradsuite, rng, Error};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{Cmd, Common, Training};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: worst relative error {0:e}")]
    GradCheck(f64),
    #[error(transparent)]
    Lib(#[from] Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::GradCheck(_) => "gradcheck_failed",
            CliError::Lib(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(Error::Config(_)) => 3,
            _ => 1,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

const LOCK_FILE: &str = ".dialbt.lock";

/// Exclusive claim on an output directory, released on drop.
struct OutDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    fn claim(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::invalid(format!("{} is in use by another run ({} exists)", path.display(), lock.display()))
            } else {
                Error::io(&lock, e)
            }
        })?;
        Ok(OutDir {
            path: path.to_path_buf(),
            lock,
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

struct Run {
    cfg: RunConfig,
    out: OutDir,
}

/// Loads the config, applies flag overrides, validates, claims the output
/// directory and records the resolved config there.
fn setup(common: &Common, apply: impl FnOnce(&mut RunConfig)) -> Result<Run> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    apply(&mut cfg);
    let cfg = cfg.resolve()?;
    let out = OutDir::claim(&cfg.out_dir)?;
    write_text(&out.file("config.json"), &cfg.to_json()?)?;
    Ok(Run { cfg, out })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    write_text(path, &s)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("missing required input --{flag}")))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

fn training_overrides(cfg: &mut RunConfig, t: &Training) {
    set_path(&mut cfg.paths.data, &t.data);
    set(&mut cfg.train.max_steps, t.steps);
    set(&mut cfg.train.learning_rate, t.lr);
    set(&mut cfg.bt.phase.max_steps, t.steps);
    set(&mut cfg.bt.phase.learning_rate, t.lr);
}

/// A prepared data directory.
struct Data {
    vocab: Vocab,
    train: PairedCorpus,
    valid: PairedCorpus,
    test: PairedCorpus,
    mono: MonoCorpus,
    mono_valid: MonoCorpus,
}

fn encode_pairs(vocab: &Vocab, pairs: &[(String, String)]) -> PairedCorpus {
    PairedCorpus {
        pairs: pairs
            .iter()
            .map(|(c, r)| (vocab.encode(&tokenize(c)), vocab.encode(&tokenize(r))))
            .collect(),
    }
}

fn encode_mono(vocab: &Vocab, path: &Path) -> Result<MonoCorpus> {
    Ok(MonoCorpus {
        utterances: io::read_mono(path)?.iter().map(|i| vocab.encode(&i.tokens)).collect(),
    })
}

fn load_data(dir: &Path) -> Result<Data> {
    let vocab = Vocab::load(&dir.join("vocab.tsv"))?;
    let split = |name: &str| -> Result<PairedCorpus> { Ok(encode_pairs(&vocab, &io::read_paired(&dir.join(name))?)) };
    let data = Data {
        train: split("train.tsv")?,
        valid: split("valid.tsv")?,
        test: split("test.tsv")?,
        mono: encode_mono(&vocab, &dir.join("mono.txt"))?,
        mono_valid: encode_mono(&vocab, &dir.join("mono_valid.txt"))?,
        vocab,
    };
    Ok(data)
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    required(&cfg.paths.data, "data")
}

/// Rejects a checkpoint trained against a different vocabulary.
fn check_vocab(ck: &Checkpoint, vocab: &Vocab, path: &Path) -> Result<()> {
    match ck.meta.get("vocab_hash").and_then(Value::as_str) {
        Some(h) if h != vocab.hash() => Err(Error::invalid(format!(
            "{} was trained with a different vocabulary (hash {h}, data has {})",
            path.display(),
            vocab.hash()
        ))
        .into()),
        _ => Ok(()),
    }
}

fn load_pair(path: &Path, vocab: &Vocab) -> Result<Seq2SeqPair> {
    let ck = Checkpoint::load(path)?;
    check_vocab(&ck, vocab, path)?;
    Ok(Seq2SeqPair::from_checkpoint(&ck)?)
}

fn load_lm(path: &Path, vocab: &Vocab) -> Result<LanguageModel> {
    check_vocab(&Checkpoint::load(path)?, vocab, path)?;
    Ok(LanguageModel::load(path)?)
}

fn load_disc(path: &Path, vocab: &Vocab) -> Result<Discriminator> {
    check_vocab(&Checkpoint::load(path)?, vocab, path)?;
    Ok(Discriminator::load(path)?)
}

fn phase_json(r: &PhaseReport) -> Value {
    json!({"steps": r.steps, "best_valid": r.best_valid, "stopped_early": r.stopped_early})
}

pub fn run(cmd: Cmd) -> Result<String> {
    let summary = match cmd {
        Cmd::Synth {
            common,
            num_pairs,
            num_mono,
            generic_rate,
        } => synth(setup(&common, |c| {
            set(&mut c.synth.num_pairs, num_pairs);
            set(&mut c.synth.num_mono, num_mono);
            set(&mut c.synth.generic_rate, generic_rate);
        })?)?,
        Cmd::Prepare {
            common,
            pairs,
            mono,
            blocklist,
            min_count,
        } => prepare_cmd(setup(&common, |c| {
            set_path(&mut c.paths.pairs, &pairs);
            set_path(&mut c.paths.mono, &mono);
            set_path(&mut c.paths.blocklist, &blocklist);
            set(&mut c.prepare.min_count, min_count);
        })?)?,
        Cmd::TrainInit { common, training } => train_init(setup(&common, |c| training_overrides(c, &training))?)?,
        Cmd::Bt {
            common,
            training,
            checkpoint,
            iterations,
            pseudo_beam,
        } => bt(setup(&common, |c| {
            training_overrides(c, &training);
            set_path(&mut c.paths.checkpoint, &checkpoint);
            set(&mut c.bt.iterations, iterations);
            set(&mut c.bt.pseudo_beam_size, pseudo_beam);
        })?)?,
        Cmd::TrainMultitask {
            common,
            training,
            mixing_ratio,
        } => train_multitask(setup(&common, |c| {
            training_overrides(c, &training);
            set(&mut c.multitask.mixing_ratio, mixing_ratio);
        })?)?,
        Cmd::TrainLm { common, training } => train_lm(setup(&common, |c| training_overrides(c, &training))?)?,
        Cmd::TrainDisc { common, training } => train_disc(setup(&common, |c| training_overrides(c, &training))?)?,
        Cmd::Decode {
            common,
            data,
            checkpoint,
            input,
            strategy,
            beam,
            groups,
            diversity,
            nucleus_p,
            alpha,
            mmi_lambda,
            candidates,
            max_len,
            lm,
            backward,
        } => decode(setup(&common, |c| {
            set_path(&mut c.paths.data, &data);
            set_path(&mut c.paths.checkpoint, &checkpoint);
            set_path(&mut c.paths.input, &input);
            set_path(&mut c.paths.lm_checkpoint, &lm);
            set_path(&mut c.paths.backward_checkpoint, &backward);
            let d = &mut c.decode;
            set(&mut d.strategy, strategy.map(Strategy::from));
            set(&mut d.beam_size, beam);
            set(&mut d.num_groups, groups);
            set(&mut d.diversity_strength, diversity);
            set(&mut d.nucleus_p, nucleus_p);
            set(&mut d.fusion_alpha, alpha);
            set(&mut d.mmi_lambda, mmi_lambda);
            set(&mut d.mmi_candidates, candidates);
            set(&mut d.max_len, max_len);
        })?)?,
        Cmd::Retrieve {
            common,
            data,
            checkpoint,
            input,
            k,
        } => retrieve(setup(&common, |c| {
            set_path(&mut c.paths.data, &data);
            set_path(&mut c.paths.checkpoint, &checkpoint);
            set_path(&mut c.paths.input, &input);
            set(&mut c.retrieval.k, k);
        })?)?,
        Cmd::Eval {
            common,
            hyp,
            reference,
            data,
            checkpoint,
            disc,
        } => eval(setup(&common, |c| {
            set_path(&mut c.paths.hyp, &hyp);
            set_path(&mut c.paths.reference, &reference);
            set_path(&mut c.paths.data, &data);
            set_path(&mut c.paths.checkpoint, &checkpoint);
            set_path(&mut c.paths.disc_checkpoint, &disc);
        })?)?,
        Cmd::Gradcheck { common, seeds } => gradcheck(setup(&common, |_| {})?, seeds)?,
    };
    Ok(summary.to_string())
}

fn synth(run: Run) -> Result<Value> {
    let s = synth_generate(&run.cfg.synth, run.cfg.seed)?;
    let (p, m) = (run.out.file("pairs.tsv"), run.out.file("mono.txt"));
    io::write_paired(&p, &s.pairs)?;
    io::write_mono(&m, &s.mono)?;
    Ok(json!({
        "status": "ok", "command": "synth", "pairs": s.pairs.len(), "mono": s.mono.len(),
        "ent4_gap": s.ent4_gap, "pairs_path": p, "mono_path": m,
    }))
}

fn prepare_cmd(run: Run) -> Result<Value> {
    let cfg = &run.cfg;
    let pairs = io::read_paired(required(&cfg.paths.pairs, "pairs")?)?;
    let mono = io::read_mono(required(&cfg.paths.mono, "mono")?)?;
    let mut pcfg = cfg.prepare.clone();
    if let Some(b) = &cfg.paths.blocklist {
        let mut f = pcfg.mono_filter.take().unwrap_or_default();
        f.blocklist.extend(io::read_blocklist(b)?);
        f.validate()?;
        pcfg.mono_filter = Some(f);
    }
    let d = prepare(&pairs, &mono, &pcfg, cfg.seed)?;
    let text = |ids: &[u32]| detokenize(&d.vocab.decode(ids));
    let pairs_text = |c: &PairedCorpus| -> Vec<(String, String)> { c.pairs.iter().map(|(a, b)| (text(a), text(b))).collect() };
    let mono_text = |m: &MonoCorpus| -> Vec<String> { m.utterances.iter().map(|u| text(u)).collect() };
    d.vocab.save(&run.out.file("vocab.tsv"))?;
    io::write_paired(&run.out.file("train.tsv"), &pairs_text(&d.train))?;
    io::write_paired(&run.out.file("valid.tsv"), &pairs_text(&d.valid))?;
    io::write_paired(&run.out.file("test.tsv"), &pairs_text(&d.test))?;
    io::write_mono(&run.out.file("mono.txt"), &mono_text(&d.mono))?;
    io::write_mono(&run.out.file("mono_valid.txt"), &mono_text(&d.mono_valid))?;
    let rejected = d.filter.as_ref().map(|f| {
        f.counts()
            .into_iter()
            .map(|(k, v)| (format!("{k:?}").to_lowercase(), v))
            .collect::<std::collections::BTreeMap<_, _>>()
    });
    write_json(&run.out.file("filter.json"), &json!({"rejected": rejected}))?;
    Ok(json!({
        "status": "ok", "command": "prepare", "vocab_size": d.vocab.len(), "vocab_hash": d.vocab.hash(),
        "train": d.train.len(), "valid": d.valid.len(), "test": d.test.len(),
        "mono": d.mono.len(), "mono_valid": d.mono_valid.len(), "rejected": rejected,
    }))
}

fn train_init(run: Run) -> Result<Value> {
    let cfg = &run.cfg;
    let d = load_data(data_dir(cfg)?)?;
    let mcfg = cfg.model.with_vocab(d.vocab.len());
    let mut pair = Seq2SeqPair::new(mcfg, &mut rng::stream(cfg.seed, "init.seq2seq"))?;
    let report = trainer::init_train(&mut pair, &d.train, &d.valid, &cfg.train)?;
    let path = run.out.file("init.ckpt");
    pair.save(&path, Some(&d.vocab.hash()))?;
    let valid = d.valid.truncated(pair.config().max_len).pairs;
    let fwd = evalsuite::perplexity(&pair, Direction::Forward, &valid)?;
    let bwd = evalsuite::perplexity(&pair, Direction::Backward, &valid)?;
    write_json(&run.out.file("train_report.json"), &phase_json(&report))?;
    Ok(json!({
        "status": "ok", "command": "train-init", "phase": phase_json(&report),
        "valid_fwd_ppl": fwd, "valid_bwd_ppl": bwd, "checkpoint": path,
    }))
}

fn bt(run: Run) -> Result<Value> {
    let cfg = &run.cfg;
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint")?;
    let d = load_data(data_dir(cfg)?)?;
    let mut pair = load_pair(ckpt, &d.vocab)?;
    let hash = d.vocab.hash();
    let out = trainer::run_bt(&mut pair, &d.train, &d.valid, &d.mono, &d.mono_valid, &cfg.bt, |k, p, trace| {
        p.save(&run.out.file(&format!("iter{k}.ckpt")), Some(&hash))?;
        let trace_path = run.out.file("trace.csv");
        fs::write(&trace_path, trace.to_csv()).map_err(|e| Error::io(&trace_path, e))
    })?;
    let final_path = run.out.file("final.ckpt");
    pair.save(&final_path, Some(&hash))?;
    let phases: Vec<Value> = out
        .phases
        .iter()
        .map(|(b, f)| json!({"backward_phase": phase_json(b), "forward_phase": phase_json(f)}))
        .collect();
    write_json(
        &run.out.file("bt_report.json"),
        &json!({"trace": out.trace, "phases": phases, "stopped_early": out.stopped_early}),
    )?;
    Ok(json!({
        "status": "ok", "command": "bt", "iterations": out.phases.len(), "stopped_early": out.stopped_early,
        "fwd_ppl": out.trace.fwd_ppl, "bwd_ppl": out.trace.bwd_ppl, "checkpoint": final_path,
    }))
}

fn train_multitask(run: Run) -> Result<Value> {
    let cfg = &run.cfg;
    let d = load_data(data_dir(cfg)?)?;
    let mcfg = cfg.model.with_vocab(d.vocab.len());
    let mut pair = Seq2SeqPair::new(mcfg, &mut rng::stream(cfg.seed, "init.multitask"))?;
    let report = trainer::multitask_train(&mut pair, &d.train, &d.valid, &d.mono, cfg.multitask.mixing_ratio, &cfg.train)?;
    let path = run.out.file("multitask.ckpt");
    pair.save(&path, Some(&d.vocab.hash()))?;
    write_json(&run.out.file("train_report.json"), &phase_json(&report))?;
    Ok(json!({"status": "ok", "command": "train-multitask", "phase": phase_json(&report), "checkpoint": path}))
}

fn train_lm(run: Run) -> Result<Value> {
    let cfg = &run.cfg;
    let d = load_data(data_dir(cfg)?)?;
    let mcfg = cfg.model.with_vocab(d.vocab.len());
    let mut lm = LanguageModel::new(mcfg, &mut rng::stream(cfg.seed, "init.lm"))?;
    let report = trainer::train_lm(&mut lm, &d.mono.utterances, &d.mono_valid.utterances, &cfg.train)?;
    let path = run.out.file("lm.ckpt");
    lm.save(&path, Some(&d.vocab.hash()))?;
    write_json(&run.out.file("train_report.json"), &phase_json(&report))?;
    Ok(json!({"status": "ok", "command": "train-lm", "phase": phase_json(&report), "checkpoint": path}))
}

fn train_disc(run: Run) -> Result<Value> {
    let cfg = &run.cfg;
    let d = load_data(data_dir(cfg)?)?;
    let mcfg = cfg.model.with_vocab(d.vocab.len());
    let mut disc = Discriminator::new(mcfg, &mut rng::stream(cfg.seed, "init.disc"))?;
    let report = trainer::train_discriminator(&mut disc, &d.train, &d.valid, &cfg.train)?;
    let path = run.out.file("disc.ckpt");
    disc.save(&path, Some(&d.vocab.hash()))?;
    write_json(&run.out.file("train_report.json"), &phase_json(&report))?;
    Ok(json!({"status": "ok", "command": "train-disc", "phase": phase_json(&report), "checkpoint": path}))
}

/// Contexts from `--input` (one per line, first TSV column) or the test split.
fn contexts(cfg: &RunConfig, d: &Data, max_len: usize) -> Result<Vec<(String, Vec<u32>)>> {
    let texts: Vec<String> = match &cfg.paths.input {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.split('\t').next().unwrap_or("").to_string())
                .collect()
        }
        None => d.test.pairs.iter().map(|(c, _)| detokenize(&d.vocab.decode(c))).collect(),
    };
    texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let ids = d.vocab.encode(&tokenize(&t));
            if ids.is_empty() {
                return Err(Error::invalid(format!("context {} is empty", i + 1)).into());
            }
            let ids = corpus::truncate(&ids, max_len).to_vec();
            Ok((detokenize(&d.vocab.decode(&ids)), ids))
        })
        .collect()
}

fn decode(run: Run) -> Result<Value> {
    let cfg = &run.cfg;
    let dc = &cfg.decode;
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint")?;
    let lm_path = match dc.strategy {
        Strategy::Fused => Some(required(&cfg.paths.lm_checkpoint, "lm")?),
        _ => None,
    };
    let d = load_data(data_dir(cfg)?)?;
    let pair = load_pair(ckpt, &d.vocab)?;
    let lm = match lm_path {
        Some(p) => Some(load_lm(p, &d.vocab)?),
        _ => None,
    };
    let backward = match (dc.strategy, &cfg.paths.backward_checkpoint) {
        (Strategy::Mmi, Some(p)) => Some(load_pair(p, &d.vocab)?),
        _ => None,
    };
    let model = DirectedModel::new(&pair, Direction::Forward);
    let mut sample_rng = rng::stream(cfg.seed, "decode.sample");
    let mut rows = Vec::new();
    for (text, src) in contexts(cfg, &d, pair.config().max_len)? {
        let (tokens, lp) = match dc.strategy {
            Strategy::Beam => {
                let h = beam_search(&model, &src, dc)?.remove(0);
                (h.content().to_vec(), h.logprob)
            }
            Strategy::Diverse => {
                let groups = diverse_beam_search(&model, &src, dc)?;
                let h = groups
                    .iter()
                    .filter_map(|g| g.first())
                    .reduce(|a, b| if b.logprob > a.logprob { b } else { a })
                    .expect("at least one group");
                (h.content().to_vec(), h.logprob)
            }
            Strategy::Nucleus => {
                let h = nucleus_sample(&model, &src, dc, &mut sample_rng)?;
                (h.content().to_vec(), h.logprob)
            }
            Strategy::Fused => {
                let h = fused_decode(model, LmModel(lm.as_ref().unwrap()), &src, dc)?;
                (h.content().to_vec(), h.logprob)
            }
            Strategy::Mmi => {
                let r = mmi_rerank(&pair, backward.as_ref().unwrap_or(&pair), &src, dc, &mut sample_rng)?;
                let b = r.best();
                (b.hyp.content().to_vec(), b.score)
            }
        };
        rows.push((text, detokenize(&d.vocab.decode(&tokens)), lp));
    }
    let path = run.out.file("decode.tsv");
    io::write_decode_tsv(&path, &rows)?;
    Ok(json!({
        "status": "ok", "command": "decode", "strategy": format!("{:?}", dc.strategy).to_lowercase(),
        "responses": rows.len(), "output": path,
    }))
}

fn retrieve(run: Run) -> Result<Value> {
    let cfg = &run.cfg;
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint")?;
    let d = load_data(data_dir(cfg)?)?;
    let pair = load_pair(ckpt, &d.vocab)?;
    let pool: Vec<Vec<u32>> = d.mono.utterances.iter().chain(&d.mono_valid.utterances).cloned().collect();
    let index = RetrievalIndex::build(&pair, &pool)?;
    if index.is_empty() {
        return Err(Error::invalid("monologue corpus is empty").into());
    }
    let mut rows = Vec::new();
    for (text, src) in contexts(cfg, &d, pair.config().max_len)? {
        let hit = retrieve_respond(&index, &pair, &src, cfg.retrieval.k)?;
        rows.push((text, detokenize(&d.vocab.decode(index.candidate(hit.index))), hit.score));
    }
    let path = run.out.file("retrieve.tsv");
    io::write_decode_tsv(&path, &rows)?;
    Ok(json!({"status": "ok", "command": "retrieve", "responses": rows.len(), "candidates": index.len(), "output": path}))
}

/// `None` for metrics undefined on this sample; other errors propagate.
fn defined(r: dialbt::Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn eval(run: Run) -> Result<Value> {
    let cfg = &run.cfg;
    let hyp_path = required(&cfg.paths.hyp, "hyp")?;
    let hyps = io::read_decode_tsv(hyp_path)?;
    let refs = io::read_decode_tsv(required(&cfg.paths.reference, "ref")?)?;
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!("{} hypotheses but {} references", hyps.len(), refs.len())).into());
    }
    if hyps.is_empty() {
        return Err(Error::invalid("no hypotheses to evaluate").into());
    }
    let hyp_tok: Vec<Vec<String>> = hyps.iter().map(|(_, r)| tokenize(r)).collect();
    let ref_tok: Vec<Vec<String>> = refs.iter().map(|(_, r)| tokenize(r)).collect();
    let mut report = MetricsReport::new(hyps.len(), cfg.fingerprint()?);
    report.bleu2 = defined(evalsuite::bleu2(&hyp_tok, &ref_tok))?;
    report.dist1 = defined(evalsuite::dist_n(&hyp_tok, 1))?;
    report.dist2 = defined(evalsuite::dist_n(&hyp_tok, 2))?;
    report.ent4 = defined(evalsuite::ent_n(&hyp_tok, 4))?;

    let needs_vocab = cfg.paths.disc_checkpoint.is_some() || cfg.paths.checkpoint.is_some();
    if needs_vocab {
        let dir = data_dir(cfg)?;
        let vocab = Vocab::load(&dir.join("vocab.tsv"))?;
        if let Some(p) = &cfg.paths.disc_checkpoint {
            let disc = load_disc(p, &vocab)?;
            let max_len = disc.config().max_len;
            let enc = |s: &str| corpus::truncate(&vocab.encode(&tokenize(s)), max_len).to_vec();
            // Empty responses cannot fool the discriminator; they count as
            // detected.
            let (mut ctx, mut resp) = (Vec::new(), Vec::new());
            for (c, r) in &hyps {
                let (c, r) = (enc(c), enc(r));
                if !c.is_empty() && !r.is_empty() {
                    ctx.push(c);
                    resp.push(r);
                }
            }
            report.adver = Some(if ctx.is_empty() {
                0.0
            } else {
                evalsuite::adver_score(&disc, &ctx, &resp)? * ctx.len() as f64 / hyps.len() as f64
            });
        }
        if let Some(p) = &cfg.paths.checkpoint {
            let pair = load_pair(p, &vocab)?;
            report.ppl = Some(evalsuite::perplexity(
                &pair,
                Direction::Forward,
                &encode_pairs(&vocab, &refs).truncated(pair.config().max_len).pairs,
            )?);
        }
    }
    report.validate()?;
    report.emit(&run.out.file("report.json"))?;
    let label = hyp_path.file_stem().and_then(|s| s.to_str()).unwrap_or("hyp");
    write_text(&run.out.file("report.csv"), &format!("{CSV_HEADER}\n{}\n", report.csv_row(label)))?;
    let mut v = serde_json::to_value(&report).map_err(Error::from)?;
    v["status"] = json!("ok");
    v["command"] = json!("eval");
    Ok(v)
}

fn gradcheck(run: Run, seeds: u64) -> Result<Value> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let mut results = Vec::new();
    for s in run.cfg.seed..run.cfg.seed + seeds {
        results.extend(gradsuite::run(s)?);
    }
    let worst = gradsuite::worst(&results).map(|r| r.rel_error).unwrap_or(0.0);
    write_json(&run.out.file("gradcheck.json"), &json!({"tolerance": gradsuite::TOLERANCE, "worst": worst, "cases": results}))?;
    if !(worst < gradsuite::TOLERANCE) {
        return Err(CliError::GradCheck(worst));
    }
    Ok(json!({
        "status": "ok", "command": "gradcheck", "cases": results.len(), "worst_rel_error": worst,
        "tolerance": gradsuite::TOLERANCE,
    }))
}

