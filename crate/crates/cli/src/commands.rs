use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dabs_core::acbs::{write_traces_jsonl, TraceRecord};
use dabs_core::controls::{
    build_stress_splits, negation_shift, prepare_states, rand2l_trials, region_sweep, select, single_layer_controls,
    write_region_csv, RegionBands,
};
use dabs_core::corpus::{encode_corpus, export_jsonl, generate_tagged, ingest_jsonl, split, stats as corpus_stats};
use dabs_core::costbench::{
    flops_profile, generate_requests, measure_profile, run_bench, sweep_m, write_sweep_csv, BenchReport, CostProfile,
    ServePath, ServiceSource, SweepRow,
};
use dabs_core::objectives::{evaluate_model, paired_t_test, train as fit, write_metric_log, PairedTest, TrainOutcome};
use dabs_core::{
    Ablation, Component, DabsError, DabsModel, Example, Label, LayerOrder, Result, Sentence, SelectionTrace, Vocab,
};
use serde::Serialize;

use crate::config::{BenchMode, RunConfig};

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| DabsError::Config(format!("missing {flag}")))
}

fn load_corpus(path: &Path) -> Result<Vec<Sentence>> {
    let ing = ingest_jsonl(path)?;
    for w in &ing.warnings {
        let line = serde_json::json!({
            "warning": "span_snapped",
            "line": w.line,
            "sentence_id": w.sentence_id,
            "term": w.term,
            "span": [w.span.start, w.span.end],
        });
        eprintln!("{line}");
    }
    Ok(ing.sentences)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_err(e: csv::Error) -> DabsError {
    DabsError::Io(std::io::Error::other(e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Train/test sentences and their id-encoded forms under a train-split vocabulary.
struct Prepared {
    vocab: Vocab,
    train: Vec<Example>,
    test: Vec<Example>,
    test_sentences: Vec<Sentence>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let corpus = load_corpus(require(&cfg.data.path, "--data")?)?;
    let (train, test) = match &cfg.data.test {
        Some(t) => (corpus, load_corpus(t)?),
        None => split(&corpus, cfg.data.test_fraction, cfg.data.split_seed)?,
    };
    if test.is_empty() {
        return Err(DabsError::Config("test split is empty; raise data.test_fraction or pass --test".into()));
    }
    let vocab = Vocab::build(&train, cfg.data.min_count);
    Ok(Prepared {
        train: encode_corpus(&train, &vocab),
        test: encode_corpus(&test, &vocab),
        vocab,
        test_sentences: test,
    })
}

fn train_variant(cfg: &RunConfig, prep: &Prepared, seed: u64) -> Result<(DabsModel, TrainOutcome)> {
    let (mc, weights) = cfg.model_config(prep.vocab.len(), seed);
    let tc = dabs_core::TrainConfig { loss: weights, ..cfg.train_config(seed) };
    let mut model = DabsModel::new(mc)?;
    let out = fit(&mut model, &prep.train, &prep.test, &tc)?;
    Ok((model, out))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(DabsModel, Vocab)> {
    let dir = require(&cfg.checkpoint, "--checkpoint")?;
    Ok((DabsModel::load(dir)?, Vocab::load(&dir.join("vocab.json"))?))
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let tagged = generate_tagged(&cfg.generate)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (_, p) in &tagged {
        *counts.entry(serde_json::to_value(p)?.as_str().unwrap_or_default().to_string()).or_default() += 1;
    }
    let sentences: Vec<Sentence> = tagged.into_iter().map(|t| t.0).collect();
    let mut out = create(&cfg.out.join("corpus.jsonl"))?;
    export_jsonl(&mut out, &sentences)?;
    out.flush()?;
    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "n_sentences": sentences.len(),
        "phenomena": counts,
        "gen_spec": cfg.generate,
    });
    write_json(&cfg.out.join("manifest.json"), &manifest)
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(require(&cfg.data.path, "--data")?)?;
    let s = corpus_stats(&corpus)?;
    write_json(&cfg.out.join("stats.json"), &s)?;
    println!("{}", serde_json::to_string(&s)?);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: String,
    seed: u64,
    best_epoch: usize,
    best: &'a dabs_core::EvalReport,
}

fn config_label(cfg: &RunConfig) -> String {
    let mut parts = vec![cfg.component.label().to_string()];
    parts.extend(cfg.ablations.iter().map(|a| a.label().to_string()));
    parts.join(" ")
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let prep = prepare(cfg)?;
    let (model, out) = train_variant(cfg, &prep, cfg.seed)?;
    model.save(&cfg.out)?;
    prep.vocab.save(&cfg.out.join("vocab.json"))?;
    let mut log = create(&cfg.out.join("metrics.csv"))?;
    write_metric_log(&mut log, &out.logs)?;
    log.flush()?;
    let mut test = create(&cfg.out.join("test.jsonl"))?;
    export_jsonl(&mut test, &prep.test_sentences)?;
    test.flush()?;
    let summary = TrainSummary { config: config_label(cfg), seed: cfg.seed, best_epoch: out.best_epoch, best: &out.best };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let (model, vocab) = load_checkpoint(cfg)?;
    let corpus = load_corpus(require(&cfg.data.path, "--data")?)?;
    let ev = evaluate_model(&model, &encode_corpus(&corpus, &vocab), &cfg.loss)?;
    write_json(&cfg.out.join("eval.json"), &ev.report)?;
    println!("{}", serde_json::to_string(&ev.report)?);
    Ok(())
}

pub fn trace(cfg: &RunConfig) -> Result<()> {
    let (model, vocab) = load_checkpoint(cfg)?;
    let corpus = load_corpus(require(&cfg.data.path, "--data")?)?;
    let mut records = Vec::new();
    for (s, ex) in corpus.iter().zip(encode_corpus(&corpus, &vocab)) {
        let traces = model.predict_shared(&ex.ids, &ex.spans(), None)?;
        for (q, t) in s.queries().iter().zip(&traces) {
            records.push(TraceRecord::new(&s.id, q, t));
        }
    }
    let mut out = create(&cfg.out.join("traces.jsonl"))?;
    write_traces_jsonl(&mut out, &records)?;
    out.flush()?;
    Ok(())
}

pub struct ProbeRequest {
    pub ablate: Vec<String>,
    pub components: bool,
    pub regions: bool,
    pub layer_order: bool,
    pub k_sweep: bool,
    pub paired: bool,
}

/// One configuration row of a multi-seed comparison.
#[derive(Serialize)]
struct VariantRow {
    config: String,
    seeds: String,
    mean_acc: f64,
    mean_mf1: f64,
    /// Mean macro-F1 minus the reference row's.
    delta_mf1: f64,
    mf1_per_seed: String,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains every variant over the probe seeds; the first variant is the reference.
fn variant_table(base: &RunConfig, prep: &Prepared, variants: &[(String, RunConfig)]) -> Result<Vec<VariantRow>> {
    let seeds = &base.probes.seeds;
    if seeds.is_empty() {
        return Err(DabsError::Config("probes.seeds is empty".into()));
    }
    let mut rows: Vec<VariantRow> = Vec::new();
    for (label, vcfg) in variants {
        let mut acc = Vec::new();
        let mut mf1 = Vec::new();
        for &s in seeds {
            let (_, out) = train_variant(vcfg, prep, s)?;
            acc.push(out.best.accuracy);
            mf1.push(out.best.macro_f1);
        }
        let m = mean(&mf1);
        let reference = rows.first().map_or(m, |r| r.mean_mf1);
        rows.push(VariantRow {
            config: label.clone(),
            seeds: join(seeds),
            mean_acc: mean(&acc),
            mean_mf1: m,
            delta_mf1: m - reference,
            mf1_per_seed: join(&mf1),
        });
    }
    Ok(rows)
}

fn full_base(cfg: &RunConfig) -> RunConfig {
    RunConfig { component: Component::Full, ablations: Vec::new(), ..cfg.clone() }
}

fn parse_ablations(names: &[String]) -> Result<Vec<Ablation>> {
    if names.iter().any(|n| n == "all") {
        return Ok(Ablation::ALL.to_vec());
    }
    names.iter().map(|n| Ablation::parse(n.trim())).collect()
}

#[derive(Serialize)]
struct OrderRow {
    order: String,
    seed: String,
    test_mf1: f64,
    probe_mf1: f64,
}

#[derive(Serialize)]
struct PairedRow {
    metric: &'static str,
    full_mean: f64,
    baseline_mean: f64,
    delta: f64,
    t: f64,
    p: f64,
    df: usize,
    significant: bool,
}

#[derive(Serialize)]
struct RunRow {
    seed: u64,
    config: &'static str,
    acc: f64,
    mf1: f64,
}

pub fn probe(cfg: &RunConfig, req: &ProbeRequest) -> Result<()> {
    if req.ablate.is_empty() && !(req.components || req.regions || req.layer_order || req.k_sweep || req.paired) {
        return Err(DabsError::Config(
            "probe needs at least one of --ablate, --components, --regions, --layer-order, --k-sweep, --paired".into(),
        ));
    }
    let ablations = parse_ablations(&req.ablate)?;
    if req.regions {
        probe_regions(cfg)?;
    }
    if !(ablations.is_empty() && !req.components && !req.layer_order && !req.k_sweep && !req.paired) {
        let prep = prepare(cfg)?;
        let full = full_base(cfg);
        if !ablations.is_empty() {
            let mut variants = vec![(Component::Full.label().to_string(), full.clone())];
            for a in &ablations {
                variants.push((a.label().to_string(), RunConfig { ablations: vec![*a], ..full.clone() }));
            }
            write_csv(&cfg.out.join("ablations.csv"), &variant_table(cfg, &prep, &variants)?)?;
        }
        if req.components {
            let variants: Vec<_> = [Component::Full, Component::EncoderOnly, Component::DoraOnly, Component::AcbsOnly]
                .into_iter()
                .map(|c| (c.label().to_string(), RunConfig { component: c, ..full.clone() }))
                .collect();
            write_csv(&cfg.out.join("components.csv"), &variant_table(cfg, &prep, &variants)?)?;
        }
        if req.k_sweep {
            let mut variants = Vec::new();
            for &k in &cfg.probes.k_values {
                let mut v = full.clone();
                v.dora.k = k;
                variants.push((format!("K={k}"), v));
            }
            write_csv(&cfg.out.join("k_sweep.csv"), &variant_table(cfg, &prep, &variants)?)?;
        }
        if req.layer_order {
            probe_layer_order(&full, &prep)?;
        }
        if req.paired {
            probe_paired(&full, &prep)?;
        }
    }
    Ok(())
}

fn probe_layer_order(full: &RunConfig, prep: &Prepared) -> Result<()> {
    let splits = build_stress_splits(&prep.test_sentences, &full.probes.stress)?;
    if splits.negation.is_empty() {
        return Err(DabsError::Input(format!(
            "negation split is empty (no test sentence longer than {} tokens with a negation cue); lower probes.stress.negation_min_len",
            full.probes.stress.negation_min_len
        )));
    }
    let probe_set = select(&prep.test, &splits.negation);
    let (mc, weights) = full.model_config(prep.vocab.len(), full.seed);
    let tc = dabs_core::TrainConfig { loss: weights, ..full.train_config(full.seed) };
    let orders = [LayerOrder::Normal, LayerOrder::Reversed, LayerOrder::Shuffled { seed: full.probes.shuffle_seed }];
    let runs = dabs_core::controls::layer_order_harness(
        &mc,
        &tc,
        &orders,
        &full.probes.seeds,
        &prep.train,
        &prep.test,
        &probe_set,
    )?;
    let mut rows: Vec<OrderRow> = runs
        .iter()
        .map(|r| OrderRow {
            order: r.order.label(),
            seed: r.seed.to_string(),
            test_mf1: r.test.macro_f1,
            probe_mf1: r.probe.macro_f1,
        })
        .collect();
    for o in orders {
        let sel: Vec<_> = runs.iter().filter(|r| r.order == o).collect();
        rows.push(OrderRow {
            order: o.label(),
            seed: "mean".into(),
            test_mf1: mean(&sel.iter().map(|r| r.test.macro_f1).collect::<Vec<_>>()),
            probe_mf1: mean(&sel.iter().map(|r| r.probe.macro_f1).collect::<Vec<_>>()),
        });
    }
    write_csv(&full.out.join("layer_order.csv"), &rows)
}

fn probe_paired(full: &RunConfig, prep: &Prepared) -> Result<()> {
    let baseline = RunConfig { component: Component::EncoderOnly, ..full.clone() };
    let mut runs = Vec::new();
    let (mut fa, mut fm, mut ba, mut bm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &s in &full.probes.seeds {
        let (_, f) = train_variant(full, prep, s)?;
        let (_, b) = train_variant(&baseline, prep, s)?;
        fa.push(f.best.accuracy);
        fm.push(f.best.macro_f1);
        ba.push(b.best.accuracy);
        bm.push(b.best.macro_f1);
        runs.push(RunRow { seed: s, config: Component::Full.label(), acc: f.best.accuracy, mf1: f.best.macro_f1 });
        runs.push(RunRow {
            seed: s,
            config: Component::EncoderOnly.label(),
            acc: b.best.accuracy,
            mf1: b.best.macro_f1,
        });
    }
    let row = |metric, a: &[f64], b: &[f64], t: PairedTest| PairedRow {
        metric,
        full_mean: mean(a),
        baseline_mean: mean(b),
        delta: t.delta_mean,
        t: t.t,
        p: t.p,
        df: t.df,
        significant: t.significant,
    };
    let rows = vec![
        row("acc", &fa, &ba, paired_t_test(&fa, &ba)?),
        row("mf1", &fm, &bm, paired_t_test(&fm, &bm)?),
    ];
    write_csv(&full.out.join("paired.csv"), &rows)?;
    write_csv(&full.out.join("paired_runs.csv"), &runs)
}

fn probe_regions(cfg: &RunConfig) -> Result<()> {
    let (model, vocab) = load_checkpoint(cfg)?;
    let corpus = load_corpus(require(&cfg.data.path, "--data")?)?;
    let examples = encode_corpus(&corpus, &vocab);
    let bands = match &cfg.probes.bands {
        Some(b) => b.clone(),
        None => RegionBands::standard(model.cfg.dora.k)?,
    };
    let sweep = region_sweep(&model, &examples, &bands)?;
    let mut out = create(&cfg.out.join("regions.csv"))?;
    write_region_csv(&mut out, &[("checkpoint".to_string(), sweep)])?;
    out.flush()?;
    let states = prepare_states(&model, &examples)?;
    write_json(&cfg.out.join("single_layer.json"), &single_layer_controls(&model, &examples, &states)?)?;
    let rand2l = rand2l_trials(&model, &examples, &states, cfg.probes.rand2l_trials, cfg.probes.rand2l_seed)?;
    write_json(&cfg.out.join("rand2l.json"), &rand2l)?;
    let mut traces: Vec<(&[String], SelectionTrace)> = Vec::new();
    for (ex, st) in examples.iter().zip(&states) {
        for &(span, _) in &ex.aspects {
            traces.push((&ex.words, model.read(st, span, None)?));
        }
    }
    let items: Vec<(&[String], &SelectionTrace)> = traces.iter().map(|(w, t)| (*w, t)).collect();
    write_json(&cfg.out.join("negation_shift.json"), &negation_shift(&items, &bands)?)
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    mode: BenchMode,
    nonreuse_pays_dora: bool,
    profile: CostProfile,
    flops_profile: CostProfile,
    reuse: BenchReport,
    nonreuse: BenchReport,
    sweep: &'a [SweepRow],
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let model = match &cfg.checkpoint {
        Some(_) => load_checkpoint(cfg)?.0,
        None => DabsModel::new(cfg.model_config(cfg.encoder.vocab_size, cfg.seed).0)?,
    };
    let vocab = model.cfg.encoder.vocab_size;
    let requests = generate_requests(&cfg.workload, vocab)?;
    if requests.is_empty() {
        return Err(DabsError::Config("workload produced no requests; raise rate or duration".into()));
    }
    let lengths: Vec<usize> = requests.iter().map(|r| r.tokens.len()).collect();
    let flops = flops_profile(&model, &lengths)?;
    let (source, profile, pays_dora) = match cfg.bench.mode {
        BenchMode::Simulated => {
            let profile = cfg.bench.profile.unwrap_or(flops).in_seconds(cfg.bench.flops_per_second)?;
            let pays = cfg.bench.nonreuse_pays_dora;
            (ServiceSource::Simulated { profile, nonreuse_pays_dora: pays }, profile, pays)
        }
        BenchMode::Real => {
            let sample: Vec<Example> = requests
                .iter()
                .take(cfg.bench.profile_sentences.max(1))
                .enumerate()
                .map(|(i, r)| Example {
                    id: format!("req{i}"),
                    ids: r.tokens.clone(),
                    words: Vec::new(),
                    aspects: r.spans.iter().map(|&s| (s, Label::Neutral)).collect(),
                })
                .collect();
            let measured = measure_profile(&model, &sample, &cfg.timing)?;
            // the real per-aspect path reruns substrate construction
            (ServiceSource::Real(&model), measured.seconds, true)
        }
    };
    let rows = sweep_m(source, &cfg.workload, &cfg.bench.m_values, vocab, &profile, &flops, pays_dora)?;
    let mut out = create(&cfg.out.join("sweep.csv"))?;
    write_sweep_csv(&mut out, &rows)?;
    out.flush()?;
    let report = BenchOutput {
        mode: cfg.bench.mode,
        nonreuse_pays_dora: pays_dora,
        profile,
        flops_profile: flops,
        reuse: run_bench(source, &cfg.workload, &requests, ServePath::Reuse)?,
        nonreuse: run_bench(source, &cfg.workload, &requests, ServePath::NonReuse)?,
        sweep: &rows,
    };
    write_json(&cfg.out.join("bench.json"), &report)
}
