//! Runtime verification suites behind the `gradcheck` and `selftest` CLI
//! subcommands: gradient checks for every loss and network block, and a
//! curated set of property checks over the core invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, ParamStore, Tape, Tensor};
use crate::baselines::{nexcp_quantile, split_cp_quantile};
use crate::core::{
    coverage_error, interval_from_quantile, is_consistent, running_error, soft_error, sort_ladder,
    AlphaLadder, Interval,
};
use crate::error::{Error, Result};
use crate::ncc::{
    coverage_loss_node, efficiency_loss_node, monotonicity_loss_node, quantile_loss_node,
    total_loss_node, NccConfig, NccController,
};
use crate::neural::{self, EncoderConfig};

/// One named check with its measured figure and threshold.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckLine {
    fn new(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        let pass = value < threshold;
        Self { name: name.into(), value, threshold, pass }
    }
}

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Points closer than this to a pinball/ReLU kink are resampled.
const KINK_GUARD: f64 = 1e-3;

fn draw_away_from(rng: &mut ChaCha8Rng, n: usize, s: f64, guard: f64) -> Vec<f64> {
    loop {
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
        if q.iter().all(|&qi| (s - qi).abs() > guard) {
            return q;
        }
    }
}

/// Gradient checks for the four losses, their weighted total, and the
/// network blocks, each at 5 random points.
pub fn gradcheck_report() -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let ladder = AlphaLadder::new(vec![0.9, 0.5, 0.2, 0.1])?;
    let n = ladder.len();
    let mut out = Vec::new();

    let loss_check = |name: &str,
                          rng: &mut ChaCha8Rng,
                          f: &dyn Fn(&mut Tape, crate::autodiff::Var, f64) -> Result<crate::autodiff::Var>|
     -> Result<CheckLine> {
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let s = rng.random_range(0.0..2.0);
            let q = draw_away_from(rng, n, s, KINK_GUARD);
            // keep the monotonicity quotients clear of their relu kink
            let q: Vec<f64> = q
                .iter()
                .enumerate()
                .map(|(i, &v)| v + i as f64 * 1e-2)
                .collect();
            let point = Tensor::vector(q);
            let err = grad_check(|tape, x| f(tape, x, s), &point, FD_STEP)?;
            worst = worst.max(err);
        }
        Ok(CheckLine::new(name, worst, GRAD_TOL))
    };

    let lad = ladder.clone();
    out.push(loss_check("loss.quantile", &mut rng, &|tape, x, s| {
        quantile_loss_node(tape, x, s, &lad)
    })?);
    let lad = ladder.clone();
    out.push(loss_check("loss.coverage", &mut rng, &|tape, x, s| {
        coverage_loss_node(tape, x, s, 0.25, &[1, 0, 1, 0][..lad.len()])
    })?);
    out.push(loss_check("loss.efficiency", &mut rng, &|tape, x, s| {
        efficiency_loss_node(tape, x, s, 0.25)
    })?);
    let lad = ladder.clone();
    out.push(loss_check("loss.monotonicity", &mut rng, &|tape, x, _s| {
        monotonicity_loss_node(tape, x, &lad)
    })?);
    let lad = ladder.clone();
    out.push(loss_check("loss.total", &mut rng, &|tape, x, s| {
        total_loss_node(tape, x, s, 0.25, &[1, 0, 1, 0][..lad.len()], &lad, [1.0, 1.0, 0.1, 1.0])
    })?);

    out.push(gru_gradcheck(&mut rng)?);
    out.push(attention_gradcheck(&mut rng)?);
    out.push(head_gradcheck(&mut rng)?);
    out.push(predictor_param_gradcheck(&mut rng)?);
    Ok(out)
}

fn gru_gradcheck(rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let (steps, dim, hidden) = (3usize, 2usize, 4usize);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x517E);
        let mut store = ParamStore::new();
        neural::insert_gru_params(&mut store, &mut prng, "g", dim, hidden)?;
        let point =
            Tensor::vector((0..steps * dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let err = grad_check(
            |tape, x| {
                let rows: Vec<_> = (0..steps)
                    .map(|i| tape.slice(x, i * dim, (i + 1) * dim))
                    .collect::<Result<_>>()?;
                let h = neural::gru_encode(tape, &store, "g", &rows)?;
                let sq = tape.square(h);
                Ok(tape.sum(sq))
            },
            &point,
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckLine::new("block.gru", worst, GRAD_TOL))
}

fn attention_gradcheck(rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let hidden = 4usize;
    let kvs = 3usize;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xA77);
        let mut store = ParamStore::new();
        neural::insert_attention_params(&mut store, &mut prng, "att", hidden)?;
        let point = Tensor::vector(
            (0..(kvs + 1) * hidden).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let err = grad_check(
            |tape, x| {
                let query = tape.slice(x, 0, hidden)?;
                let kv_vars: Vec<_> = (0..kvs)
                    .map(|i| tape.slice(x, (i + 1) * hidden, (i + 2) * hidden))
                    .collect::<Result<_>>()?;
                let fused = neural::attention_fuse(tape, &store, "att", 2, query, &kv_vars)?;
                let sq = tape.square(fused);
                Ok(tape.sum(sq))
            },
            &point,
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckLine::new("block.attention", worst, GRAD_TOL))
}

fn head_gradcheck(rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let (hidden, n) = (4usize, 3usize);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < 5 && attempts < 100 {
        attempts += 1;
        let mut prng = ChaCha8Rng::seed_from_u64(attempts ^ 0x4EAD);
        let mut store = ParamStore::new();
        store.insert("head.w1", neural::xavier_tensor(&mut prng, hidden, hidden))?;
        store.insert("head.b1", Tensor::zeros(vec![hidden]))?;
        store.insert("head.w2", neural::xavier_tensor(&mut prng, n, hidden))?;
        store.insert("head.b2", Tensor::zeros(vec![n]))?;
        let point = Tensor::vector((0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect());
        // skip points whose pre-relu outputs sit on the kink
        let pre = {
            let mut tape = Tape::new();
            let z = tape.leaf(point.clone());
            let w1 = tape.param(&store, "head.w1")?;
            let b1 = tape.param(&store, "head.b1")?;
            let h0 = tape.matmul(w1, z)?;
            let h1 = tape.add(h0, b1)?;
            let ht = tape.tanh(h1);
            let w2 = tape.param(&store, "head.w2")?;
            let b2 = tape.param(&store, "head.b2")?;
            let o0 = tape.matmul(w2, ht)?;
            let o = tape.add(o0, b2)?;
            tape.value(o).data().to_vec()
        };
        if pre.iter().any(|v| v.abs() < KINK_GUARD) {
            continue;
        }
        let err = grad_check(
            |tape, x| {
                let (ladder, _) = neural::monotone_head(tape, &store, "head", x, n)?;
                Ok(tape.sum(ladder))
            },
            &point,
            FD_STEP,
        )?;
        worst = worst.max(err);
        done += 1;
    }
    Ok(CheckLine::new("block.monotone_head", worst, GRAD_TOL))
}

/// Full forward pass differentiated with respect to parameter tensors:
/// the accumulated Param-node gradient against central finite differences
/// obtained by perturbing the store.
fn predictor_param_gradcheck(rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let cfg = EncoderConfig {
        hidden: 4,
        heads: 2,
        window: 3,
        ladder_len: 2,
        seq_views: 1,
        static_dim: 1,
        head_hidden: 4,
    };
    let mut prng = ChaCha8Rng::seed_from_u64(0xF0);
    let mut store = neural::init_params(&cfg, &mut prng)?;
    let input = neural::PredictorInput {
        err_seq: (0..3).map(|_| (0..2).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
        q_seq: (0..3).map(|_| (0..2).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
        s_seq: (0..3).map(|_| vec![rng.random_range(0.0..1.0)]).collect(),
        views: vec![(0..3).map(|_| vec![rng.random_range(-1.0..1.0)]).collect()],
        static_feats: vec![0.1],
    };

    let objective = |store: &ParamStore| -> Result<f64> {
        let (ladder, _) = neural::predictor_values(store, &cfg, &input)?;
        Ok(ladder.iter().sum())
    };

    // analytic gradients for every parameter in one sweep
    {
        let mut tape = Tape::new();
        let (ladder, _) = neural::predictor_forward(&mut tape, &store, &cfg, &input)?;
        let loss = tape.sum(ladder);
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut store)?;
    }

    let mut worst: f64 = 0.0;
    for name in ["enc_s.wz", "fuse_all.wv", "head.w2", "static.w"] {
        let analytic = store.grad(name)?.data().to_vec();
        let len = analytic.len();
        // probe a handful of coordinates per tensor
        for k in 0..len.min(5) {
            let coord = (k * 7) % len;
            let mut plus = store.clone();
            plus.get_mut(name)?.data_mut()[coord] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(name)?.data_mut()[coord] -= FD_STEP;
            let fd = (objective(&plus)? - objective(&minus)?) / (2.0 * FD_STEP);
            let a = analytic[coord];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    store.zero_grads();
    Ok(CheckLine::new("block.predictor_params", worst, GRAD_TOL))
}

/// Curated runtime property suite.
pub fn selftest_report() -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E1F);
    let mut out = Vec::new();

    // soft error converges to the hard indicator
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let s: f64 = rng.random_range(0.0..2.0);
        let q: f64 = rng.random_range(-0.5..2.5);
        if (s - q).abs() < 1e-4 {
            continue;
        }
        let diff =
            (soft_error(s, q, 1e-6)? - f64::from(coverage_error(s, q))).abs();
        worst = worst.max(diff);
    }
    out.push(CheckLine::new("core.soft_error_limit", worst, 1e-6));

    // sort_ladder is idempotent, value-preserving, and yields consistency
    let ladder = AlphaLadder::new(vec![0.9, 0.5, 0.2, 0.1])?;
    let mut violations = 0usize;
    for _ in 0..200 {
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..3.0)).collect();
        let sorted = sort_ladder(&q, &ladder)?;
        let twice = sort_ladder(&sorted, &ladder)?;
        if sorted != twice {
            violations += 1;
        }
        let mut a = q.clone();
        let mut b = sorted.clone();
        a.sort_unstable_by(f64::total_cmp);
        b.sort_unstable_by(f64::total_cmp);
        if a != b {
            violations += 1;
        }
        let intervals: Vec<Interval> =
            sorted.iter().map(|&qi| interval_from_quantile(0.5, qi)).collect();
        if !is_consistent(&intervals, &ladder)? {
            violations += 1;
        }
    }
    out.push(CheckLine::new("core.sort_ladder_properties", violations as f64, 0.5));

    // running error with w = 1 equals the raw error
    let errs: Vec<u8> = (0..50).map(|_| u8::from(rng.random_bool(0.3))).collect();
    let mut worst = 0.0f64;
    for t in 1..=errs.len() {
        let diff: f64 = running_error(&errs, t, 1)? - f64::from(errs[t - 1]);
        worst = worst.max(diff.abs());
    }
    out.push(CheckLine::new("core.running_error_w1", worst, 1e-15));

    // nexcp with rho = 1 recovers split conformal exactly
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let alpha = rng.random_range(0.02..0.98);
        if nexcp_quantile(&scores, 1.0, alpha)? != split_cp_quantile(&scores, alpha)? {
            mismatches += 1;
        }
    }
    out.push(CheckLine::new("baselines.nexcp_rho1_equals_splitcp", mismatches as f64, 0.5));

    // telescoping identity over a short raw run
    let mut cfg = NccConfig::new(AlphaLadder::new(vec![0.5, 0.1])?, 1);
    cfg.encoder = EncoderConfig {
        hidden: 8,
        heads: 2,
        window: 4,
        ladder_len: 2,
        seq_views: 1,
        static_dim: 1,
        head_hidden: 8,
    };
    cfg.eta = Some(0.3);
    cfg.window = 3;
    cfg.score_scale = Some(1.0);
    cfg.stages_initial = [0, 0, 0];
    cfg.retrain_interval = None;
    cfg.seed = 5;
    let mut controller = NccController::new(cfg)?;
    let steps = 150;
    for _ in 0..steps {
        controller.push_forecast(0.0);
        controller.ncc_step(rng.random_range(0.0..2.0))?;
    }
    let mut worst: f64 = 0.0;
    for (i, &alpha) in [0.5, 0.1].iter().enumerate() {
        let col = controller.err_column(i).to_vec();
        let mut acc = 0.0;
        for t in 1..=steps {
            acc += running_error(&col, t, 3)? - alpha;
        }
        worst = worst.max((controller.delta()[i] - 0.3 * acc).abs());
    }
    out.push(CheckLine::new("ncc.telescoping_identity", worst, 1e-9));

    // crps pinball average against exact step-cdf integration
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu = rng.random_range(-1.0..1.0);
        let sigma = rng.random_range(0.5..2.0);
        let y = rng.random_range(-2.0..2.0);
        let levels: Vec<f64> = (1..=99).map(|k| (k as f64 - 0.5) / 99.0).collect();
        let values: Vec<f64> =
            levels.iter().map(|&p| mu + sigma * inverse_normal_cdf(p)).collect();
        let pinball = crate::metrics::crps(y, &levels, &values)?;
        let integral = step_cdf_crps(y, &values);
        let rel = (pinball - integral).abs() / integral.abs().max(1e-9);
        worst = worst.max(rel);
    }
    out.push(CheckLine::new("metrics.crps_two_routes", worst, 1e-3));

    Ok(out)
}

/// CRPS of the empirical step CDF of `values`, integrated exactly piece by
/// piece (independent of the pinball route).
pub fn step_cdf_crps(y: f64, values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut points = sorted.clone();
    points.push(y);
    points.sort_unstable_by(f64::total_cmp);
    let lo = points[0] - 1.0;
    let hi = points[points.len() - 1] + 1.0;
    let mut breaks = vec![lo];
    breaks.extend(points);
    breaks.push(hi);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let cdf = sorted.iter().filter(|&&v| v <= mid).count() as f64 / n;
        let ind = f64::from(mid >= y);
        total += (cdf - ind) * (cdf - ind) * (b - a);
    }
    total
}

/// Acklam's rational approximation of the standard normal inverse CDF
/// (|error| < 1.2e-9), enough for the self-test oracle.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Runs a report and fails if any line failed.
pub fn ensure_all_pass(lines: &[CheckLine]) -> Result<()> {
    let failed: Vec<&CheckLine> = lines.iter().filter(|l| !l.pass).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::State(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            lines.len(),
            failed.iter().map(|l| l.name.as_str()).collect::<Vec<_>>().join(", ")
        )))
    }
}
