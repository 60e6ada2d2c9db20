use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context as _};
use serde::{Deserialize, Serialize};
use traverse_core::corpus::{Corpus, FrameKey};
use traverse_core::dataset::layout::{
    append_labels, read_labels, read_odometry, verify, write_labels, LabelRow, Manifest, LABELS,
};
use traverse_core::dataset::{auto_annotate_sessions, Provenance, Split, AUTO_MIN_VELOCITY, AUTO_WINDOW_S};
use traverse_core::dcgan::{load_gan, save_gan, train_dcgan};
use traverse_core::estop::{self, EStop};
use traverse_core::eval::{
    benchmark, data_efficiency_study, evaluate, metrics_from_predictions, pipeline_memory, prediction_trace,
    saliency_map, write_map_png, write_metrics_csv, EvalError, LabeledFeatures, MetricsRow, TestSequence, THRESHOLD,
};
use traverse_core::heads::{FeatureExtractor, FeatureSubset, Pipeline, SequencePredictor};
use traverse_core::invgen::{anomaly_scores, invert_by_backprop, load_invgen, save_invgen, select_tau};
use traverse_core::reannotate::{epsilon_drift, reannotate as soft_label};
use traverse_core::synthworld::{make_dataset, DatasetPlan};
use traverse_core::workflow::{
    fit_single, fit_temporal, gan_positives, scenario_sequences, temporal_set, test_sequences, with_soft_labels,
    HandSet, SoftLabels,
};

use crate::config::Config;
use crate::{CliError, HeadChoice};

const DATASET: &str = "dataset.json";
const REPORT: &str = "reannotation_report.json";

/// Where the run's dataset lives, recorded by `synth` or `ingest`.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetRef {
    root: PathBuf,
    fingerprint: String,
    stereo: bool,
}

pub struct Context {
    pub cfg: Config,
    pub dir: PathBuf,
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

impl Context {
    /// Creates the run directory and records the resolved configuration and
    /// seed, so any command can be replayed from the directory alone.
    pub fn open(cfg: Config) -> Result<Self, CliError> {
        let dir = cfg.run.dir.clone();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
        std::fs::write(dir.join("seed"), format!("{}\n", cfg.run.seed)).context("writing seed")?;
        Ok(Self { cfg, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, command: &'static str, required: &'static str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Stage { command, required, missing: p })
        }
    }

    fn dataset(&self, command: &'static str) -> Result<DatasetRef, CliError> {
        let p = self.require(DATASET, command, "synth or ingest")?;
        let text = std::fs::read_to_string(&p).context("reading dataset.json")?;
        Ok(serde_json::from_str(&text).context("parsing dataset.json")?)
    }

    /// The dataset at model resolution with every channel it has.
    fn corpus(&self, command: &'static str) -> Result<Corpus, CliError> {
        let d = self.dataset(command)?;
        let size = self.cfg.data.arch(3).image_size;
        let channels = if d.stereo { 6 } else { 3 };
        Ok(Corpus::load(&d.root, size, channels).map_err(runtime)?)
    }

    fn soft_labels(&self, command: &'static str) -> Result<SoftLabels, CliError> {
        self.require(REPORT, command, "reannotate")?;
        let rows = read_labels(&self.path(LABELS)).map_err(runtime)?;
        Ok(rows
            .into_iter()
            .filter(|r| r.provenance == Provenance::ModelReannotated)
            .map(|r| (FrameKey::new(&r.env, &r.session, r.frame_index), r.label))
            .collect())
    }

    fn extractor(&self, stereo: bool, command: &'static str) -> Result<FeatureExtractor<f32>, CliError> {
        let (name, req) = if stereo { ("invgen_stereo.ckpt", "train-invgen --stereo") } else { ("invgen.ckpt", "train-invgen") };
        let p = self.require(name, command, req)?;
        let (gen, dis, inv, _) = load_invgen::<f32>(&p).map_err(runtime)?;
        Ok(FeatureExtractor::new(gen, dis, inv).map_err(|e| runtime(anyhow!(e)))?)
    }

    fn head(&self, kind: HeadChoice, command: &'static str) -> Result<Pipeline<f32>, CliError> {
        let (name, req) = head_file(kind);
        let p = self.require(name, command, req)?;
        Ok(Pipeline::load(&p).map_err(runtime)?)
    }

    fn optional_head(&self, name: &str) -> Result<Option<Pipeline<f32>>, CliError> {
        let p = self.path(name);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(Pipeline::load(&p).map_err(runtime)?))
    }
}

fn head_file(kind: HeadChoice) -> (&'static str, &'static str) {
    match kind {
        HeadChoice::Single => ("head_single.ckpt", "train-head --kind single"),
        HeadChoice::Temporal => ("head_temporal.ckpt", "train-head --kind temporal"),
        HeadChoice::Stereo => ("head_stereo.ckpt", "train-head --kind stereo"),
    }
}

fn mono_if(corpus: &Corpus, channels: usize) -> Corpus {
    if corpus.channels == channels {
        corpus.clone()
    } else {
        corpus.mono()
    }
}

fn register(ctx: &Context, root: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let r = DatasetRef {
        root: std::path::absolute(root).context("resolving dataset path")?,
        fingerprint: manifest.fingerprint(),
        stereo: manifest.stereo,
    };
    std::fs::write(ctx.path(DATASET), serde_json::to_string_pretty(&r).expect("serializes") + "\n")
        .context("writing dataset.json")?;
    eprintln!("dataset {} ({} sessions, fingerprint {})", root.display(), manifest.sessions.len(), &r.fingerprint[..12]);
    Ok(())
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.cfg.synth;
    let root = ctx.path("data");
    if root.exists() {
        std::fs::remove_dir_all(&root).context("clearing the previous dataset")?;
    }
    let baseline = (s.stereo_baseline_px > 0).then_some(s.stereo_baseline_px);
    let manifest = make_dataset(&root, ctx.cfg.run.seed, &s.counts(), &s.sequence_spec(), s.drive_frames, baseline)
        .map_err(|e| match e {
            traverse_core::synthworld::SynthError::EmptyCount(k) => {
                CliError::Config(format!("invalid value for `synth.{k}`: must be positive"))
            }
            other => runtime(other),
        })?;
    register(ctx, &root, &manifest)
}

pub fn ingest(ctx: &Context, source: &Path) -> Result<(), CliError> {
    let manifest = verify(source).map_err(runtime)?;
    register(ctx, source, &manifest)
}

pub fn annotate(ctx: &Context) -> Result<(), CliError> {
    let d = ctx.dataset("annotate")?;
    let manifest = Manifest::read(&d.root).map_err(runtime)?;
    let logs = manifest
        .sessions
        .iter()
        .map(|s| read_odometry(&d.root, &s.env, &s.session))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let auto = auto_annotate_sessions(&logs, AUTO_WINDOW_S, AUTO_MIN_VELOCITY);
    if auto.skipped_windows > 0 {
        eprintln!("warning: {} windows lack velocity and were skipped", auto.skipped_windows);
    }
    let mut rows: Vec<LabelRow> = read_labels(&d.root.join(LABELS))
        .map_err(runtime)?
        .into_iter()
        .filter(|r| r.provenance == Provenance::Hand)
        .collect();
    let n = auto.positives.len();
    rows.extend(auto.positives.into_iter().map(|(env, session, frame_index, label)| LabelRow {
        env,
        session,
        frame_index,
        label: label.value(),
        provenance: label.provenance(),
    }));
    write_labels(&ctx.path(LABELS), &rows).map_err(runtime)?;
    eprintln!("{n} automatic positives written to labels.csv");
    Ok(())
}

pub fn train_gan(ctx: &Context, stereo: bool) -> Result<(), CliError> {
    let cmd = "train-gan";
    ctx.require(LABELS, cmd, "annotate")?;
    let corpus = ctx.corpus(cmd)?;
    if stereo && corpus.channels != 6 {
        return Err(CliError::Config("`--stereo` needs a stereo dataset (synth.stereo_baseline_px > 0)".into()));
    }
    let corpus = mono_if(&corpus, if stereo { 6 } else { 3 });
    let pos = gan_positives(&corpus, ctx.cfg.data.gan_positives);
    let arch = ctx.cfg.data.arch(corpus.channels);
    let cfg = ctx.cfg.gan_config();
    let path = ctx.path(if stereo { "gan_stereo.ckpt" } else { "gan.ckpt" });
    eprintln!("training on {} positives", pos.len());
    let out = train_dcgan(&pos, arch, &cfg, Some(&path)).map_err(runtime)?;
    save_gan(&path, &out.gen, &out.dis, &cfg, out.curves.len()).map_err(runtime)?;
    write_json(&ctx.path(if stereo { "gan_stereo_curves.json" } else { "gan_curves.json" }), &out.curves)
}

pub fn train_invgen(ctx: &Context, stereo: bool) -> Result<(), CliError> {
    let cmd = "train-invgen";
    let gan = if stereo {
        ctx.require("gan_stereo.ckpt", cmd, "train-gan --stereo")?
    } else {
        ctx.require("gan.ckpt", cmd, "train-gan")?
    };
    let (gen, dis, meta) = load_gan::<f32>(&gan).map_err(runtime)?;
    let corpus = mono_if(&ctx.corpus(cmd)?, meta.arch.channels);
    let pos = gan_positives(&corpus, ctx.cfg.data.gan_positives);
    let val = HandSet::of(&corpus, Split::Val).positives();
    let cfg = ctx.cfg.invgen_config();
    let path = ctx.path(if stereo { "invgen_stereo.ckpt" } else { "invgen.ckpt" });
    let out = traverse_core::invgen::train_invgen(&pos, &gen, &dis, &cfg, &val, Some(&path)).map_err(runtime)?;
    save_invgen(&path, &gen, &dis, &out.invgen, &cfg, out.curves.len()).map_err(runtime)?;
    write_json(&ctx.path(if stereo { "invgen_stereo_curves.json" } else { "invgen_curves.json" }), &out.curves)
}

pub fn train_head(ctx: &Context, kind: HeadChoice) -> Result<(), CliError> {
    let cmd = "train-head";
    let stereo = kind == HeadChoice::Stereo;
    let ex = ctx.extractor(stereo, cmd)?;
    let corpus = mono_if(&ctx.corpus(cmd)?, ex.channels());
    let (file, _) = head_file(kind);
    let seed = ctx.cfg.run.seed;
    let pipeline = match kind {
        HeadChoice::Single => {
            let train = HandSet::of(&corpus, Split::Train).features(&ex);
            let val = HandSet::of(&corpus, Split::Val).features(&ex);
            let hc = ctx.cfg.head.config(seed);
            fit_single(&ex, ctx.cfg.head.subset, (&train.features, &train.soft_labels()), &val, &hc).map_err(runtime)?
        }
        HeadChoice::Temporal | HeadChoice::Stereo => {
            let soft = ctx.soft_labels(cmd)?;
            let train = temporal_set(&corpus, &ex, Split::Train, &soft);
            let val = temporal_set(&corpus, &ex, Split::Val, &soft);
            fit_temporal(&ex, &train, &val, &ctx.cfg.temporal_config()).map_err(runtime)?
        }
    };
    let train_cfg = serde_json::to_value(&ctx.cfg).expect("config serializes");
    pipeline.save(&ctx.path(file), seed, train_cfg).map_err(runtime)?;
    eprintln!("wrote {file}");
    Ok(())
}

pub fn reannotate(ctx: &Context) -> Result<(), CliError> {
    let cmd = "reannotate";
    let before = ctx.head(HeadChoice::Single, cmd)?;
    let corpus = mono_if(&ctx.corpus(cmd)?, 3);
    let labels_path = ctx.require(LABELS, cmd, "annotate")?;
    // a rerun replaces the previous soft labels instead of stacking them
    let kept: Vec<LabelRow> = read_labels(&labels_path)
        .map_err(runtime)?
        .into_iter()
        .filter(|r| r.provenance != Provenance::ModelReannotated)
        .collect();
    write_labels(&labels_path, &kept).map_err(runtime)?;
    let mut soft = SoftLabels::new();
    for split in [Split::Train, Split::Val] {
        let r = soft_label(&corpus, &corpus.unlabeled(split), &before);
        for w in r.warnings() {
            eprintln!("warning: {w}");
        }
        append_labels(&labels_path, &r.labels).map_err(runtime)?;
        soft.extend(r.soft_labels());
    }
    let ex = &before.extractor;
    let train = HandSet::of(&corpus, Split::Train).features(ex);
    let val = HandSet::of(&corpus, Split::Val).features(ex);
    let u = corpus.unlabeled(Split::Train);
    let train_soft: SoftLabels = u.iter().map(|k| (k.clone(), soft[k])).collect();
    let (x, y) = with_soft_labels(&corpus, ex, &train, &train_soft);
    let hc = ctx.cfg.head.config(ctx.cfg.run.seed);
    let after = fit_single(ex, before.head.subset(), (&x, &y), &val, &hc).map_err(runtime)?;
    let train_cfg = serde_json::to_value(&ctx.cfg).expect("config serializes");
    after.save(&ctx.path("head_retrained.ckpt"), ctx.cfg.run.seed, train_cfg).map_err(runtime)?;
    let report = epsilon_drift(
        &corpus,
        &u,
        &before,
        &after,
        ("head_single.ckpt", "head_retrained.ckpt"),
        "hand labels plus soft labels of training-split static frames",
    );
    report.write(&ctx.path(REPORT)).map_err(runtime)?;
    eprintln!("{} frames re-annotated; ε = {:.4}", soft.len(), report.epsilon);
    Ok(())
}

/// All test-split frames with ground truth: hand-labeled frames one at a
/// time, then the recorded sequences in order.
fn test_set(corpus: &Corpus) -> Vec<TestSequence> {
    let mut t = HandSet::of(corpus, Split::Test).as_sequences();
    t.extend(test_sequences(corpus, Split::Test));
    t
}

fn row_with_memory(mut row: MetricsRow, p: &Pipeline<f32>) -> MetricsRow {
    let (params, acts) = pipeline_memory(p);
    row.params_mb = Some(params);
    row.activation_mb = Some(acts);
    row
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let cmd = "eval";
    let gonet = ctx.head(HeadChoice::Single, cmd)?;
    let full = ctx.corpus(cmd)?;
    let corpus = mono_if(&full, 3);
    let test = test_set(&corpus);
    let ex = &gonet.extractor;

    let mut rows = Vec::new();
    let score = |split| {
        let h = HandSet::of(&corpus, split);
        (anomaly_scores(&ex.inv, &ex.gen, &h.positives()), anomaly_scores(&ex.inv, &ex.gen, &h.negatives()))
    };
    let (vp, vn) = score(Split::Val);
    let (tau, _) = select_tau(&vp, &vn);
    let (mut probs, mut labels) = (Vec::new(), Vec::new());
    for s in &test {
        for (p, l) in anomaly_scores(&ex.inv, &ex.gen, &s.frames).into_iter().zip(&s.labels) {
            probs.push(if p < tau { 1.0 } else { 0.0 });
            labels.push(*l);
        }
    }
    rows.push(metrics_from_predictions("invgen_unsupervised", &probs, &labels, THRESHOLD).map_err(runtime)?);
    rows.push(row_with_memory(evaluate("gonet", &gonet, &test, THRESHOLD).map_err(runtime)?, &gonet));
    for (name, file) in [("gonet_retrained", "head_retrained.ckpt"), ("gonet_t", "head_temporal.ckpt")] {
        if let Some(p) = ctx.optional_head(file)? {
            rows.push(row_with_memory(evaluate(name, &p, &test, THRESHOLD).map_err(runtime)?, &p));
        }
    }
    if let Some(p) = ctx.optional_head("head_stereo.ckpt")? {
        let stereo_test = test_set(&full);
        rows.push(row_with_memory(evaluate("gonet_ts", &p, &stereo_test, THRESHOLD).map_err(runtime)?, &p));
    }
    write_metrics_csv(&ctx.path("metrics.csv"), &rows).map_err(runtime)?;
    for r in &rows {
        eprintln!("{:<20} accuracy {:6.2}%", r.model, r.accuracy);
    }

    let e = &ctx.cfg.eval;
    if !e.efficiency_counts.is_empty() {
        let train = HandSet::of(&corpus, Split::Train).features(ex);
        let val = HandSet::of(&corpus, Split::Val).features(ex);
        let th = HandSet::of(&corpus, Split::Test).features(ex);
        let pool = LabeledFeatures { features: train.features, labels: train.labels };
        let base = ctx.cfg.head.config(ctx.cfg.run.seed);
        let subset: FeatureSubset = gonet.head.subset();
        let curve = data_efficiency_study(&e.efficiency_counts, &e.efficiency_seeds, &pool, &th.labels, |sub, seed| {
            let hc = traverse_core::heads::HeadConfig { seed: base.seed.wrapping_add(seed), ..base };
            let p = fit_single(ex, subset, (&sub.features, &sub.soft_labels()), &val, &hc).map_err(EvalError::from)?;
            Ok(p.predict_features(&th.features))
        })
        .map_err(|e| match e {
            EvalError::Insufficient { .. } => CliError::Config(format!("invalid value for `eval.efficiency_counts`: {e}")),
            other => runtime(other),
        })?;
        curve.write_csv(&ctx.path("efficiency.csv")).map_err(runtime)?;
    }

    if e.saliency_frames > 0 {
        let frames = HandSet::of(&corpus, Split::Test).frames;
        let step = (frames.len() / e.saliency_frames).max(1);
        let sample: Vec<_> = frames.into_iter().step_by(step).take(e.saliency_frames).collect();
        let map = saliency_map(&gonet, &sample);
        let dir = ctx.path("saliency");
        std::fs::create_dir_all(&dir).context("creating saliency/")?;
        write_map_png(&dir.join("gonet.png"), &map).map_err(runtime)?;
        write_json(&dir.join("gonet.json"), &map)?;
    }
    Ok(())
}

pub fn bench(ctx: &Context) -> Result<(), CliError> {
    let cmd = "bench";
    let gonet = ctx.head(HeadChoice::Single, cmd)?;
    let corpus = ctx.corpus(cmd)?;
    let e = &ctx.cfg.eval;
    let mut out = String::from("model,throughput_hz,median_latency_s,params_mb,activation_mb\n");
    let mut line = |name: &str, p: &Pipeline<f32>, frame: &ndarray::Array3<f32>| {
        let mut state = p.start_stream();
        let r = benchmark(e.bench_warmup, e.bench_iters, || {
            std::hint::black_box(p.push_frame(&mut state, frame));
        });
        let (params, acts) = pipeline_memory(p);
        eprintln!("{name:<16} {:8.1} Hz", r.throughput_hz);
        out.push_str(&format!("{name},{:.3},{:.6},{params:.3},{acts:.3}\n", r.throughput_hz, r.median_latency_s));
    };
    let mono = mono_if(&corpus, 3);
    let frame = HandSet::of(&mono, Split::Test).frames.first().cloned().ok_or_else(|| runtime(anyhow!("no test frames")))?;
    line("gonet", &gonet, &frame);
    for (name, file) in [("gonet_t", "head_temporal.ckpt")] {
        if let Some(p) = ctx.optional_head(file)? {
            line(name, &p, &frame);
        }
    }
    if let Some(p) = ctx.optional_head("head_stereo.ckpt")? {
        let f = HandSet::of(&corpus, Split::Test).frames[0].clone();
        line("gonet_ts", &p, &f);
    }
    let ex = &gonet.extractor;
    let one_shot = benchmark(e.bench_warmup, e.bench_iters, || {
        std::hint::black_box(ex.inv.invert_one(&frame));
    });
    let lambda = ctx.cfg.invgen.lambda;
    let search = benchmark(0, 2, || {
        std::hint::black_box(invert_by_backprop(&ex.gen, &ex.dis, &frame, e.backprop_steps, 0.1, lambda, 1).expect("steps > 0"));
    });
    out.push_str(&format!("invert_one_shot,{:.3},{:.6},,\n", one_shot.throughput_hz, one_shot.median_latency_s));
    out.push_str(&format!(
        "invert_backprop_{},{:.5},{:.6},,\n",
        e.backprop_steps, search.throughput_hz, search.median_latency_s
    ));
    eprintln!("inversion speed ratio {:.0}", one_shot.throughput_hz / search.throughput_hz);
    std::fs::write(ctx.path("bench.csv"), out).context("writing bench.csv")?;
    Ok(())
}

pub fn trace(ctx: &Context) -> Result<(), CliError> {
    let cmd = "trace";
    let gonet = ctx.head(HeadChoice::Single, cmd)?;
    let full = ctx.corpus(cmd)?;
    let d = ctx.dataset(cmd)?;
    let manifest = Manifest::read(&d.root).map_err(runtime)?;
    let s = &ctx.cfg.synth;
    let size = ctx.cfg.data.arch(3).image_size;
    let mut models: Vec<(&str, Pipeline<f32>)> = vec![("gonet", gonet)];
    for (name, file) in [("gonet_t", "head_temporal.ckpt"), ("gonet_ts", "head_stereo.ckpt")] {
        if let Some(p) = ctx.optional_head(file)? {
            models.push((name, p));
        }
    }
    // scripted scenarios exist only for generated datasets
    let plan = DatasetPlan::build(manifest.seed, &s.counts(), &s.sequence_spec(), 0, manifest.stereo.then_some(s.stereo_baseline_px))
        .map_err(runtime)?;
    let mut sets: Vec<(String, Vec<TestSequence>, Vec<TestSequence>)> = Vec::new();
    if plan.split == manifest.split {
        let channels = if manifest.stereo { 6 } else { 3 };
        let stereo = scenario_sequences(&plan, size, channels, s.stereo_baseline_px).map_err(runtime)?;
        let mono = scenario_sequences(&plan, size, 3, s.stereo_baseline_px).map_err(runtime)?;
        sets.push(("scenarios".into(), mono, stereo));
    }
    let mono_corpus = mono_if(&full, 3);
    sets.push(("sequences".into(), test_sequences(&mono_corpus, Split::Test), test_sequences(&full, Split::Test)));
    let dir = ctx.path("traces");
    std::fs::create_dir_all(&dir).context("creating traces/")?;
    for (_, mono, stereo) in &sets {
        for (i, seq) in mono.iter().enumerate() {
            let series = models
                .iter()
                .map(|(name, p)| {
                    let frames = if p.channels() == 6 { &stereo[i].frames } else { &seq.frames };
                    (name.to_string(), p.predict_sequence(frames))
                })
                .collect();
            let t = prediction_trace(series, &seq.labels, s.frame_period_s);
            let stem = seq.name.replace('/', "_");
            t.write_csv(&dir.join(format!("{stem}.csv"))).map_err(runtime)?;
            t.write_png(&dir.join(format!("{stem}.png"))).map_err(runtime)?;
        }
    }
    eprintln!("traces written to {}", dir.display());
    Ok(())
}

pub fn stream(ctx: &Context, model: HeadChoice, session: Option<&str>, source_hz: f64) -> Result<(), CliError> {
    let cmd = "stream";
    let p = ctx.head(model, cmd)?;
    let corpus = mono_if(&ctx.corpus(cmd)?, p.channels());
    let s = match session {
        Some(name) => {
            let (env, sess) = name
                .split_once('/')
                .ok_or_else(|| CliError::Config(format!("`--session` expects env/session, got `{name}`")))?;
            corpus.session(env, sess).ok_or_else(|| runtime(anyhow!("no session {name} in the dataset")))?
        }
        None => *corpus
            .sequences(Split::Test)
            .first()
            .ok_or_else(|| runtime(anyhow!("the dataset has no test sequences")))?,
    };
    let items: Vec<(f64, ndarray::Array3<f32>)> =
        s.odometry.iter().map(|o| o.timestamp_s).zip(s.frames.iter().cloned()).collect();
    let pace = (source_hz > 0.0).then(|| Duration::from_secs_f64(1.0 / source_hz));
    let source = items.into_iter().inspect(move |_| {
        if let Some(d) = pace {
            std::thread::sleep(d);
        }
    });
    let st = &ctx.cfg.stream;
    let rate = (st.rate_hz > 0.0).then_some(st.rate_hz);
    let mut state = p.start_stream();
    let stdout = std::io::stdout();
    let mut err = None;
    let summary = estop::stream(
        source,
        rate,
        EStop::new(st.threshold, st.hysteresis_k),
        |frame| p.push_frame(&mut state, frame),
        |rec| {
            use std::io::Write;
            let line = serde_json::to_string(rec).expect("record serializes");
            if let Err(e) = writeln!(stdout.lock(), "{line}") {
                err.get_or_insert(e);
            }
        },
    );
    if let Some(e) = err {
        return Err(runtime(anyhow!(e).context("writing stream output")));
    }
    eprintln!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
