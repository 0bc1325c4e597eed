//! Reuse cost model, analytic FLOPs, component timing and a latency bench
//! driven either by real forward passes or by a cost profile.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acbs::{Readout, Span};
use crate::corpus::Example;
use crate::error::{DabsError, Result};
use crate::model::DabsModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostUnit {
    Flops,
    Seconds,
}

/// Per-sentence fixed costs and the per-aspect read cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub c_enc: f64,
    pub c_dora: f64,
    pub c_ctx: f64,
    pub c_read: f64,
    pub unit: CostUnit,
}

impl CostProfile {
    /// The same profile in seconds at a nominal `flops_per_second`; a
    /// seconds profile is returned unchanged.
    pub fn in_seconds(self, flops_per_second: f64) -> Result<CostProfile> {
        if !(flops_per_second > 0.0) || !flops_per_second.is_finite() {
            return Err(DabsError::Config(format!("flops_per_second must be positive, got {flops_per_second}")));
        }
        Ok(match self.unit {
            CostUnit::Seconds => self,
            CostUnit::Flops => CostProfile {
                c_enc: self.c_enc / flops_per_second,
                c_dora: self.c_dora / flops_per_second,
                c_ctx: self.c_ctx / flops_per_second,
                c_read: self.c_read / flops_per_second,
                unit: CostUnit::Seconds,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.c_enc, self.c_dora, self.c_ctx, self.c_read];
        if all.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(DabsError::Domain(format!("cost profile entries must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }

    /// Cost of answering `m` aspects of one sentence.
    pub fn reuse_cost(&self, m: usize) -> f64 {
        (self.c_enc + self.c_dora + self.c_ctx) + m as f64 * self.c_read
    }

    /// Cost of `m` independent passes; `with_dora` charges substrate
    /// construction to every pass.
    pub fn nonreuse_cost(&self, m: usize, with_dora: bool) -> f64 {
        let dora = if with_dora { self.c_dora } else { 0.0 };
        m as f64 * (self.c_enc + dora + self.c_ctx + self.c_read)
    }
}

/// `(speedup, flops_reduction)` of reuse over `m` independent passes that
/// skip substrate construction.
pub fn model_speedup(profile: &CostProfile, m: usize) -> Result<(f64, f64)> {
    model_speedup_with(profile, m, false)
}

pub fn model_speedup_with(profile: &CostProfile, m: usize, nonreuse_pays_dora: bool) -> Result<(f64, f64)> {
    profile.validate()?;
    if m == 0 {
        return Err(DabsError::Domain("aspect count must be at least 1".into()));
    }
    let reuse = profile.reuse_cost(m);
    let nonreuse = profile.nonreuse_cost(m, nonreuse_pays_dora);
    if reuse == 0.0 || nonreuse == 0.0 {
        return Err(DabsError::Domain("zero cost profile has no defined speedup".into()));
    }
    Ok((nonreuse / reuse, 1.0 - reuse / nonreuse))
}

/// Matmul and convolution FLOPs (2 per multiply-add) of each stage for a
/// sentence of `n` tokens.
pub mod flops {
    use crate::acbs::Readout;
    use crate::model::ModelConfig;

    fn mha(n: u64, d: u64) -> u64 {
        // q, k, v, output projections; scores and weighted values over all heads
        8 * n * d * d + 4 * n * n * d
    }

    pub fn encoder(cfg: &ModelConfig, n: usize) -> u64 {
        let (n, d) = (n as u64, cfg.encoder.d as u64);
        let f = cfg.encoder.ffn_mult as u64;
        cfg.encoder.layers as u64 * (mha(n, d) + 4 * f * n * d * d)
    }

    pub fn dora(cfg: &ModelConfig, n: usize) -> u64 {
        if cfg.acbs.readout == Readout::AspectOnly {
            return 0;
        }
        let (n, d) = (n as u64, cfg.encoder.d as u64);
        let mut total = 0;
        if cfg.dora.use_lcp {
            let ks = &cfg.dora.kernel_sizes;
            total += ks.iter().map(|&k| 2 * n * d * k as u64).sum::<u64>();
            total += 2 * n * (ks.len() as u64 * d) * d;
        }
        if cfg.dora.use_depth_gru {
            total += (cfg.dora.k as u64 - 1) * 12 * n * d * d;
        }
        total
    }

    pub fn context(cfg: &ModelConfig, n: usize) -> u64 {
        if cfg.acbs.readout == Readout::AspectOnly {
            return 0;
        }
        mha(n as u64, cfg.encoder.d as u64)
    }

    pub fn read(cfg: &ModelConfig, n: usize) -> u64 {
        let (n, d, k) = (n as u64, cfg.encoder.d as u64, cfg.dora.k as u64);
        let classifier = 2 * d * 3;
        if cfg.acbs.readout == Readout::AspectOnly {
            return classifier;
        }
        let mut total = classifier + 2 * k * d + 2 * 3 * d;
        if cfg.acbs.use_token_sel {
            total += 2 * n * 2 * d * d + 2 * n * d + 2 * n * d;
        }
        if cfg.acbs.use_layer_sel {
            total += 2 * 2 * d * d + 2 * d * k;
        }
        if cfg.acbs.use_gated_fusion {
            total += 2 * 3 * d * d + 2 * d * 3;
        }
        total
    }
}

/// Analytic FLOPs profile averaged over the given sentence lengths.
pub fn flops_profile(model: &DabsModel, lengths: &[usize]) -> Result<CostProfile> {
    if lengths.is_empty() {
        return Err(DabsError::Input("flops profile needs at least one sentence".into()));
    }
    let avg = |f: &dyn Fn(usize) -> u64| lengths.iter().map(|&n| f(n) as f64).sum::<f64>() / lengths.len() as f64;
    let c = &model.cfg;
    Ok(CostProfile {
        c_enc: avg(&|n| flops::encoder(c, n)),
        c_dora: avg(&|n| flops::dora(c, n)),
        c_ctx: avg(&|n| flops::context(c, n)),
        c_read: avg(&|n| flops::read(c, n)),
        unit: CostUnit::Flops,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub warmup: usize,
    pub iters: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { warmup: 20, iters: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredProfile {
    pub seconds: CostProfile,
    pub flops: CostProfile,
    /// Calls per timed sample for each component; above 1 when a single call
    /// was below timer resolution.
    pub reps: [usize; 4],
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median seconds per call of `f(i)`, cycling `i` over the sample.
fn time_component(cfg: &TimingConfig, n_samples: usize, mut f: impl FnMut(usize) -> Result<()>) -> Result<(f64, usize)> {
    let mut reps = 1;
    loop {
        for i in 0..cfg.warmup {
            f(i % n_samples)?;
        }
        let mut samples = Vec::with_capacity(cfg.iters);
        for it in 0..cfg.iters {
            let t0 = Instant::now();
            for r in 0..reps {
                f((it * reps + r) % n_samples)?;
            }
            samples.push(t0.elapsed().as_secs_f64() / reps as f64);
        }
        let m = median(samples);
        if m * reps as f64 >= 1e-6 || reps >= 1 << 20 {
            return Ok((m, reps));
        }
        reps *= 10;
    }
}

/// Wall-clock medians of each stage in eval mode, plus analytic FLOPs over
/// the same sentences.
pub fn measure_profile(model: &DabsModel, sample: &[Example], cfg: &TimingConfig) -> Result<MeasuredProfile> {
    if sample.is_empty() || cfg.iters == 0 {
        return Err(DabsError::Input("profiling needs sentences and at least one timed iteration".into()));
    }
    let selective = model.cfg.acbs.readout == Readout::Selective;
    let stacks = sample.iter().map(|e| model.encode(&e.ids)).collect::<Result<Vec<_>>>()?;
    let subs = stacks.iter().map(|s| model.dora.build_substrate(&model.store, s)).collect::<Result<Vec<_>>>()?;
    let states = sample.iter().map(|e| model.prepare(&e.ids)).collect::<Result<Vec<_>>>()?;
    let span = |e: &Example| e.aspects.first().map(|a| a.0).unwrap_or(Span::new(1, 1));

    let (c_enc, r0) = time_component(cfg, sample.len(), |i| model.encode(&sample[i].ids).map(drop))?;
    let (c_dora, r1) = if selective {
        time_component(cfg, sample.len(), |i| model.dora.build_substrate(&model.store, &stacks[i]).map(drop))?
    } else {
        (0.0, 1)
    };
    let (c_ctx, r2) = if selective {
        time_component(cfg, sample.len(), |i| model.acbs.context_for(&model.store, &subs[i]).map(drop))?
    } else {
        (0.0, 1)
    };
    let (c_read, r3) = time_component(cfg, sample.len(), |i| model.read(&states[i], span(&sample[i]), None).map(drop))?;
    let lengths: Vec<usize> = sample.iter().map(|e| e.ids.len()).collect();
    Ok(MeasuredProfile {
        seconds: CostProfile { c_enc, c_dora, c_ctx, c_read, unit: CostUnit::Seconds },
        flops: flops_profile(model, &lengths)?,
        reps: [r0, r1, r2, r3],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    Deterministic,
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    /// Probability of M = 1, 2, ... aspects per request.
    pub m_dist: Vec<f64>,
    /// `(tokens, probability)` pairs.
    pub length_dist: Vec<(usize, f64)>,
    /// Requests per second.
    pub rate: f64,
    /// Arrival window in seconds.
    pub duration: f64,
    pub arrival: Arrival,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            m_dist: vec![0.0, 0.0, 0.0, 1.0],
            length_dist: vec![(12, 1.0)],
            rate: 50.0,
            duration: 2.0,
            arrival: Arrival::Poisson,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = |p: &[f64]| p.iter().all(|v| *v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if self.m_dist.is_empty() || !probs(&self.m_dist) {
            return Err(DabsError::Config("workload m_dist must be a probability vector".into()));
        }
        let lp: Vec<f64> = self.length_dist.iter().map(|l| l.1).collect();
        if lp.is_empty() || !probs(&lp) || self.length_dist.iter().any(|l| l.0 == 0) {
            return Err(DabsError::Config("workload length_dist must be a probability vector over positive lengths".into()));
        }
        let max_m = self.m_dist.iter().rposition(|&p| p > 0.0).map_or(0, |i| i + 1);
        if let Some(&(n, _)) = self.length_dist.iter().find(|l| l.1 > 0.0 && l.0 < max_m) {
            return Err(DabsError::Config(format!("sentences of {n} tokens cannot hold {max_m} aspects")));
        }
        if !(self.rate > 0.0) || !(self.duration > 0.0) || !self.rate.is_finite() {
            return Err(DabsError::Config("workload rate and duration must be positive".into()));
        }
        Ok(())
    }

    /// Point mass at `m` aspects.
    pub fn with_m(&self, m: usize) -> Self {
        let mut dist = vec![0.0; m];
        dist[m - 1] = 1.0;
        Self { m_dist: dist, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub arrival: f64,
    pub tokens: Vec<usize>,
    pub spans: Vec<Span>,
}

fn draw(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let mut x = rng.gen::<f64>();
    for (i, &w) in p.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Arrivals in `[0, duration)` with random token ids below `vocab` and
/// distinct single-token aspect spans.
pub fn generate_requests(spec: &WorkloadSpec, vocab: usize) -> Result<Vec<Request>> {
    spec.validate()?;
    if vocab < 3 {
        return Err(DabsError::Config("workload needs a vocabulary beyond the reserved ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lp: Vec<f64> = spec.length_dist.iter().map(|l| l.1).collect();
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        let arrival = match spec.arrival {
            Arrival::Deterministic => out.len() as f64 / spec.rate,
            Arrival::Poisson => {
                t += -(1.0 - rng.gen::<f64>()).ln() / spec.rate;
                t
            }
        };
        if arrival >= spec.duration {
            break;
        }
        let n = spec.length_dist[draw(&mut rng, &lp)].0;
        let m = 1 + draw(&mut rng, &spec.m_dist);
        let tokens = (0..n).map(|_| rng.gen_range(2..vocab)).collect();
        let mut positions: Vec<usize> = (1..=n).collect();
        let (picked, _) = rand::seq::SliceRandom::partial_shuffle(&mut positions[..], &mut rng, m);
        let mut spans: Vec<Span> = picked.iter().map(|&p| Span::new(p, p)).collect();
        spans.sort_by_key(|s| s.start);
        out.push(Request { arrival, tokens, spans });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServePath {
    Reuse,
    NonReuse,
}

/// Where service times come from.
#[derive(Clone, Copy, Debug)]
pub enum ServiceSource<'a> {
    /// Wall-clock of real eval-mode forward passes.
    Real(&'a DabsModel),
    /// Costs from a profile, read as seconds.
    Simulated { profile: CostProfile, nonreuse_pays_dora: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub path: ServePath,
    pub n_requests: usize,
    pub n_aspects: usize,
    pub completed: usize,
    pub in_flight: usize,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    /// Median per-request service time.
    pub service_p50: f64,
    /// Aspects answered per second of busy time.
    pub throughput: f64,
    pub utilization: f64,
    pub saturated: bool,
    /// Backlog growth in requests per second when saturated.
    pub queue_growth: f64,
    pub total_flops: Option<f64>,
}

/// Nearest-rank percentile: the value at rank `ceil(p * N)`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn service_times(source: ServiceSource, requests: &[Request], path: ServePath) -> Result<Vec<f64>> {
    requests
        .iter()
        .map(|r| {
            let m = r.spans.len();
            match source {
                ServiceSource::Simulated { profile, nonreuse_pays_dora } => Ok(match path {
                    ServePath::Reuse => profile.reuse_cost(m),
                    ServePath::NonReuse => profile.nonreuse_cost(m, nonreuse_pays_dora),
                }),
                ServiceSource::Real(model) => {
                    let t0 = Instant::now();
                    match path {
                        ServePath::Reuse => drop(model.predict_shared(&r.tokens, &r.spans, None)?),
                        ServePath::NonReuse => {
                            for &s in &r.spans {
                                drop(model.predict_isolated(&r.tokens, s, None)?);
                            }
                        }
                    }
                    Ok(t0.elapsed().as_secs_f64())
                }
            }
        })
        .collect()
}

/// Single-server FIFO queue over the given arrivals and service times.
/// Returns per-request latencies and finish times.
pub fn fifo_queue(arrivals: &[f64], service: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut free_at = f64::NEG_INFINITY;
    let mut latency = Vec::with_capacity(arrivals.len());
    let mut finish = Vec::with_capacity(arrivals.len());
    for (&a, &s) in arrivals.iter().zip(service) {
        let start = if free_at > a { free_at } else { a };
        free_at = start + s;
        finish.push(free_at);
        latency.push((start - a) + s);
    }
    (latency, finish)
}

pub fn run_bench(source: ServiceSource, spec: &WorkloadSpec, requests: &[Request], path: ServePath) -> Result<BenchReport> {
    spec.validate()?;
    if let ServiceSource::Simulated { profile, .. } = source {
        profile.validate()?;
    }
    let service = service_times(source, requests, path)?;
    let arrivals: Vec<f64> = requests.iter().map(|r| r.arrival).collect();
    let (latency, finish) = fifo_queue(&arrivals, &service);
    let completed = finish.iter().filter(|&&f| f <= spec.duration).count();
    let busy: f64 = service.iter().sum();
    let n_aspects: usize = requests.iter().map(|r| r.spans.len()).sum();
    let utilization = busy / spec.duration;
    let saturated = utilization > 1.0;
    let mut sorted = latency.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut svc = service.clone();
    svc.sort_by(|a, b| a.total_cmp(b));
    let total_flops = match source {
        ServiceSource::Real(model) => {
            let c = &model.cfg;
            Some(
                requests
                    .iter()
                    .map(|r| {
                        let n = r.tokens.len();
                        let m = r.spans.len() as f64;
                        let (e, d, x, rd) = (
                            flops::encoder(c, n) as f64,
                            flops::dora(c, n) as f64,
                            flops::context(c, n) as f64,
                            flops::read(c, n) as f64,
                        );
                        match path {
                            ServePath::Reuse => e + d + x + m * rd,
                            ServePath::NonReuse => m * (e + d + x + rd),
                        }
                    })
                    .sum(),
            )
        }
        ServiceSource::Simulated { .. } => None,
    };
    Ok(BenchReport {
        path,
        n_requests: requests.len(),
        n_aspects,
        completed,
        in_flight: requests.len() - completed,
        p50: nearest_rank(&sorted, 0.50),
        p95: nearest_rank(&sorted, 0.95),
        p99: nearest_rank(&sorted, 0.99),
        service_p50: nearest_rank(&svc, 0.50),
        throughput: if busy > 0.0 { n_aspects as f64 / busy } else { f64::INFINITY },
        utilization,
        saturated,
        queue_growth: if saturated { (requests.len() - completed) as f64 / spec.duration } else { 0.0 },
        total_flops,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub p50_reuse: f64,
    pub p50_nonreuse: f64,
    pub p95_reuse: f64,
    pub p95_nonreuse: f64,
    /// Ratio of median service times, non-reuse over reuse.
    pub speedup_measured: f64,
    pub speedup_model: f64,
    pub flops_reduction: f64,
    pub throughput_ratio: f64,
}

/// One row per `m`, every request carrying exactly `m` aspects.
/// `model_profile` gives the closed-form prediction and, with
/// `nonreuse_pays_dora`, the cost accounting used for it.
pub fn sweep_m(
    source: ServiceSource,
    base: &WorkloadSpec,
    ms: &[usize],
    vocab: usize,
    model_profile: &CostProfile,
    flops_profile: &CostProfile,
    nonreuse_pays_dora: bool,
) -> Result<Vec<SweepRow>> {
    if ms.is_empty() || ms.contains(&0) {
        return Err(DabsError::Config("M range must be nonempty and positive".into()));
    }
    let mut rows = Vec::with_capacity(ms.len());
    for &m in ms {
        let spec = base.with_m(m);
        let reqs = generate_requests(&spec, vocab)?;
        let reuse = run_bench(source, &spec, &reqs, ServePath::Reuse)?;
        let non = run_bench(source, &spec, &reqs, ServePath::NonReuse)?;
        let (speedup_model, _) = model_speedup_with(model_profile, m, nonreuse_pays_dora)?;
        let (_, flops_reduction) = model_speedup_with(flops_profile, m, nonreuse_pays_dora)?;
        rows.push(SweepRow {
            m,
            p50_reuse: reuse.p50,
            p50_nonreuse: non.p50,
            p95_reuse: reuse.p95,
            p95_nonreuse: non.p95,
            speedup_measured: non.service_p50 / reuse.service_p50,
            speedup_model,
            flops_reduction,
            throughput_ratio: reuse.throughput / non.throughput,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "M,p50_reuse,p50_nonreuse,p95_reuse,p95_nonreuse,speedup_measured,speedup_model,flops_reduction,throughput_ratio")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.9},{:.6},{:.6},{:.6},{:.6}",
            r.m,
            r.p50_reuse,
            r.p50_nonreuse,
            r.p95_reuse,
            r.p95_nonreuse,
            r.speedup_measured,
            r.speedup_model,
            r.flops_reduction,
            r.throughput_ratio
        )?;
    }
    Ok(())
}
