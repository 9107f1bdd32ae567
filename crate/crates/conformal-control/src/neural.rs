//! The quantile-predictor network: GRU encoders over the conformal signal
//! sequences (errors, conformalized quantiles, scores), per-view encoders
//! for auxiliary data, multi-head cross-attention fusion, and a cumulative
//! prediction head whose output ladder is non-negative and monotone by
//! construction for every parameter value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Shape of the quantile predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding width shared by every encoder.
    pub hidden: usize,
    /// Attention heads; must divide `hidden`.
    pub heads: usize,
    /// Context window length fed to the GRUs.
    pub window: usize,
    /// Ladder size n (one output quantile per miscoverage rate).
    pub ladder_len: usize,
    /// Number of auxiliary sequence views.
    pub seq_views: usize,
    /// Dimension of the static feature vector (0 disables the encoder).
    pub static_dim: usize,
    /// Width of the prediction head's hidden layer.
    pub head_hidden: usize,
}

impl EncoderConfig {
    pub fn new(hidden: usize, heads: usize, window: usize, ladder_len: usize) -> Self {
        Self { hidden, heads, window, ladder_len, seq_views: 1, static_dim: 1, head_hidden: 64 }
    }

    /// Default shape: hidden 32, 4 heads, window 32, two-layer head of 64.
    pub fn default_for(ladder_len: usize) -> Self {
        Self::new(32, 4, 32, ladder_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.ladder_len == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidParameter("encoder dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.window == 0 {
            return Err(Error::InvalidParameter("context window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fused embedding and its constituents, extracted as plain vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombinedEmbedding {
    pub combined: Vec<f64>,
    pub data: Vec<f64>,
    pub err: Vec<f64>,
    pub q: Vec<f64>,
    pub s: Vec<f64>,
}

/// Tape handles of the fusion stage, for callers that keep differentiating.
pub struct FusionVars {
    pub combined: Var,
    pub data: Var,
    pub err: Var,
    pub q: Var,
    pub s: Var,
}

/// One forward-pass input bundle. All sequences carry exactly `window` rows,
/// oldest first (pad per the controller's padding policy before calling).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PredictorInput {
    /// Per-rate binary coverage errors, `window x ladder_len`.
    pub err_seq: Vec<Vec<f64>>,
    /// Per-rate conformalized quantiles, `window x ladder_len`.
    pub q_seq: Vec<Vec<f64>>,
    /// Non-conformity scores, `window x 1`.
    pub s_seq: Vec<Vec<f64>>,
    /// Auxiliary sequence views, each `window x 1`.
    pub views: Vec<Vec<Vec<f64>>>,
    /// Static features (forecast horizon, region encoding, ...).
    pub static_feats: Vec<f64>,
}

pub(crate) fn xavier_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("xavier shape")
}

pub(crate) fn insert_gru_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
) -> Result<()> {
    for gate in ["z", "r", "h"] {
        store.insert(&format!("{prefix}.w{gate}"), xavier_tensor(rng, hidden, input_dim))?;
        store.insert(&format!("{prefix}.u{gate}"), xavier_tensor(rng, hidden, hidden))?;
        store.insert(&format!("{prefix}.b{gate}"), Tensor::zeros(vec![hidden]))?;
    }
    Ok(())
}

pub(crate) fn insert_attention_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    hidden: usize,
) -> Result<()> {
    for mat in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{mat}"), xavier_tensor(rng, hidden, hidden))?;
    }
    store.insert(&format!("{prefix}.bo"), Tensor::zeros(vec![hidden]))?;
    Ok(())
}

/// Builds a freshly initialised parameter store for the configuration.
/// Weights are Xavier-uniform from the seeded generator, biases zero.
pub fn init_params(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let h = cfg.hidden;
    let n = cfg.ladder_len;
    insert_gru_params(&mut store, rng, "enc_err", n, h)?;
    insert_gru_params(&mut store, rng, "enc_q", n, h)?;
    insert_gru_params(&mut store, rng, "enc_s", 1, h)?;
    for i in 0..cfg.seq_views {
        insert_gru_params(&mut store, rng, &format!("view{i}"), 1, h)?;
    }
    if cfg.static_dim > 0 {
        store.insert("static.w", xavier_tensor(rng, h, cfg.static_dim))?;
        store.insert("static.b", Tensor::zeros(vec![h]))?;
    }
    if cfg.seq_views > 0 || cfg.static_dim > 0 {
        insert_attention_params(&mut store, rng, "fuse_data", h)?;
    }
    insert_attention_params(&mut store, rng, "fuse_all", h)?;
    store.insert("head.w1", xavier_tensor(rng, cfg.head_hidden, h))?;
    store.insert("head.b1", Tensor::zeros(vec![cfg.head_hidden]))?;
    store.insert("head.w2", xavier_tensor(rng, n, cfg.head_hidden))?;
    store.insert("head.b2", Tensor::zeros(vec![n]))?;
    Ok(store)
}

/// Runs a standard GRU over `rows` (each a `[input_dim]` tape node) and
/// returns the final hidden state.
///
/// Gates: z = σ(Wz x + Uz h + bz), r = σ(Wr x + Ur h + br),
/// n = tanh(Wh x + Uh (r ⊙ h) + bh), h' = (1 - z) ⊙ n + z ⊙ h.
pub fn gru_encode(tape: &mut Tape, store: &ParamStore, prefix: &str, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("gru_encode needs at least one step".into()));
    }
    let wz = tape.param(store, &format!("{prefix}.wz"))?;
    let uz = tape.param(store, &format!("{prefix}.uz"))?;
    let bz = tape.param(store, &format!("{prefix}.bz"))?;
    let wr = tape.param(store, &format!("{prefix}.wr"))?;
    let ur = tape.param(store, &format!("{prefix}.ur"))?;
    let br = tape.param(store, &format!("{prefix}.br"))?;
    let wh = tape.param(store, &format!("{prefix}.wh"))?;
    let uh = tape.param(store, &format!("{prefix}.uh"))?;
    let bh = tape.param(store, &format!("{prefix}.bh"))?;
    let hidden = tape.value(bz).len();
    let mut h = tape.leaf(Tensor::zeros(vec![hidden]));
    for &x in rows {
        let wzx = tape.matmul(wz, x)?;
        let uzh = tape.matmul(uz, h)?;
        let zsum = tape.add(wzx, uzh)?;
        let zpre = tape.add(zsum, bz)?;
        let z = tape.sigmoid(zpre);

        let wrx = tape.matmul(wr, x)?;
        let urh = tape.matmul(ur, h)?;
        let rsum = tape.add(wrx, urh)?;
        let rpre = tape.add(rsum, br)?;
        let r = tape.sigmoid(rpre);

        let rh = tape.mul(r, h)?;
        let whx = tape.matmul(wh, x)?;
        let uhrh = tape.matmul(uh, rh)?;
        let nsum = tape.add(whx, uhrh)?;
        let npre = tape.add(nsum, bh)?;
        let n = tape.tanh(npre);

        let zh = tape.mul(z, h)?;
        let negz = tape.neg(z);
        let oneminus = tape.add_scalar(negz, 1.0);
        let gated = tape.mul(oneminus, n)?;
        h = tape.add(gated, zh)?;
    }
    Ok(h)
}

/// Scaled dot-product multi-head attention with a single query vector,
/// pooled to one vector through the output projection.
pub fn attention_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    query: Var,
    kvs: &[Var],
) -> Result<Var> {
    if kvs.is_empty() {
        return Err(Error::InvalidInput("attention_fuse needs at least one key/value".into()));
    }
    let wq = tape.param(store, &format!("{prefix}.wq"))?;
    let wk = tape.param(store, &format!("{prefix}.wk"))?;
    let wv = tape.param(store, &format!("{prefix}.wv"))?;
    let wo = tape.param(store, &format!("{prefix}.wo"))?;
    let bo = tape.param(store, &format!("{prefix}.bo"))?;
    let hidden = tape.value(bo).len();
    if hidden % heads != 0 {
        return Err(Error::InvalidParameter(format!(
            "hidden size {hidden} not divisible by {heads} heads"
        )));
    }
    let dk = hidden / heads;
    let q_all = tape.matmul(wq, query)?;
    let k_all: Vec<Var> = kvs.iter().map(|&kv| tape.matmul(wk, kv)).collect::<Result<_>>()?;
    let v_all: Vec<Var> = kvs.iter().map(|&kv| tape.matmul(wv, kv)).collect::<Result<_>>()?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let lo = head * dk;
        let hi = lo + dk;
        let qh = tape.slice(q_all, lo, hi)?;
        let mut scores = Vec::with_capacity(kvs.len());
        for &k in &k_all {
            let kh = tape.slice(k, lo, hi)?;
            let raw = tape.dot(qh, kh)?;
            scores.push(tape.scale(raw, scale));
        }
        let score_vec = tape.concat(&scores)?;
        let weights = tape.softmax(score_vec);
        let mut pooled: Option<Var> = None;
        for (j, &v) in v_all.iter().enumerate() {
            let vh = tape.slice(v, lo, hi)?;
            let wj = tape.slice(weights, j, j + 1)?;
            let term = tape.scale_by(vh, wj)?;
            pooled = Some(match pooled {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        head_outs.push(pooled.expect("at least one key/value"));
    }
    let stacked = tape.concat(&head_outs)?;
    let projected = tape.matmul(wo, stacked)?;
    tape.add(projected, bo)
}

/// Cumulative prediction head: a two-layer MLP whose ReLU outputs are
/// prefix-summed into a ladder, so the ladder is non-negative and
/// non-decreasing in index for every parameter value.
///
/// Returns `(ladder, deltas)` where `deltas[0]` is the base quantile and
/// `deltas[1..]` the increments.
pub fn monotone_head(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    z: Var,
    n: usize,
) -> Result<(Var, Var)> {
    if n == 0 {
        return Err(Error::InvalidParameter("ladder length must be >= 1".into()));
    }
    let w1 = tape.param(store, &format!("{prefix}.w1"))?;
    let b1 = tape.param(store, &format!("{prefix}.b1"))?;
    let w2 = tape.param(store, &format!("{prefix}.w2"))?;
    let b2 = tape.param(store, &format!("{prefix}.b2"))?;
    let pre1 = tape.matmul(w1, z)?;
    let act1in = tape.add(pre1, b1)?;
    let hid = tape.tanh(act1in);
    let pre2 = tape.matmul(w2, hid)?;
    let out = tape.add(pre2, b2)?;
    if tape.value(out).len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            actual: tape.value(out).shape().to_vec(),
        });
    }
    let deltas = tape.relu(out);
    let ladder = tape.cumsum(deltas);
    Ok((ladder, deltas))
}

/// Full forward pass: encodes the three conformal signals and the data
/// views, fuses them with cross-attention (data embedding as query), and
/// applies the cumulative head.
pub fn predictor_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    input: &PredictorInput,
) -> Result<(Var, FusionVars)> {
    cfg.validate()?;
    check_rows("err_seq", &input.err_seq, cfg.window, cfg.ladder_len)?;
    check_rows("q_seq", &input.q_seq, cfg.window, cfg.ladder_len)?;
    check_rows("s_seq", &input.s_seq, cfg.window, 1)?;
    if input.views.len() != cfg.seq_views {
        return Err(Error::InvalidInput(format!(
            "expected {} sequence views, got {}",
            cfg.seq_views,
            input.views.len()
        )));
    }
    for (i, view) in input.views.iter().enumerate() {
        check_rows(&format!("view{i}"), view, cfg.window, 1)?;
    }
    if input.static_feats.len() != cfg.static_dim {
        return Err(Error::InvalidInput(format!(
            "expected {} static features, got {}",
            cfg.static_dim,
            input.static_feats.len()
        )));
    }

    fn to_rows(tape: &mut Tape, rows: &[Vec<f64>]) -> Vec<Var> {
        rows.iter().map(|r| tape.leaf(Tensor::vector(r.clone()))).collect()
    }
    let err_rows = to_rows(tape, &input.err_seq);
    let q_rows = to_rows(tape, &input.q_seq);
    let s_rows = to_rows(tape, &input.s_seq);
    let z_err = gru_encode(tape, store, "enc_err", &err_rows)?;
    let z_q = gru_encode(tape, store, "enc_q", &q_rows)?;
    let z_s = gru_encode(tape, store, "enc_s", &s_rows)?;

    let mut view_embeds = Vec::new();
    for (i, view) in input.views.iter().enumerate() {
        let rows = to_rows(tape, view);
        view_embeds.push(gru_encode(tape, store, &format!("view{i}"), &rows)?);
    }
    if cfg.static_dim > 0 {
        let sw = tape.param(store, "static.w")?;
        let sb = tape.param(store, "static.b")?;
        let feats = tape.leaf(Tensor::vector(input.static_feats.clone()));
        let pre = tape.matmul(sw, feats)?;
        let biased = tape.add(pre, sb)?;
        view_embeds.push(tape.tanh(biased));
    }
    let z_data = if view_embeds.is_empty() {
        tape.leaf(Tensor::zeros(vec![cfg.hidden]))
    } else {
        // permutation-invariant query: the mean of the view embeddings
        let mut sum = view_embeds[0];
        for &v in &view_embeds[1..] {
            sum = tape.add(sum, v)?;
        }
        let query = tape.scale(sum, 1.0 / view_embeds.len() as f64);
        attention_fuse(tape, store, "fuse_data", cfg.heads, query, &view_embeds)?
    };

    let kvs = [z_err, z_q, z_s, z_data];
    let combined = attention_fuse(tape, store, "fuse_all", cfg.heads, z_data, &kvs)?;
    let (ladder, _deltas) = monotone_head(tape, store, "head", combined, cfg.ladder_len)?;
    Ok((ladder, FusionVars { combined, data: z_data, err: z_err, q: z_q, s: z_s }))
}

/// Convenience wrapper: runs one forward pass on a throwaway tape and
/// returns the raw ladder plus the extracted embedding values.
pub fn predictor_values(
    store: &ParamStore,
    cfg: &EncoderConfig,
    input: &PredictorInput,
) -> Result<(Vec<f64>, CombinedEmbedding)> {
    let mut tape = Tape::new();
    let (ladder, fusion) = predictor_forward(&mut tape, store, cfg, input)?;
    let embedding = CombinedEmbedding {
        combined: tape.value(fusion.combined).data().to_vec(),
        data: tape.value(fusion.data).data().to_vec(),
        err: tape.value(fusion.err).data().to_vec(),
        q: tape.value(fusion.q).data().to_vec(),
        s: tape.value(fusion.s).data().to_vec(),
    };
    Ok((tape.value(ladder).data().to_vec(), embedding))
}

fn check_rows(name: &str, rows: &[Vec<f64>], window: usize, dim: usize) -> Result<()> {
    if rows.len() != window {
        return Err(Error::InvalidInput(format!(
            "{name}: expected {window} rows, got {}",
            rows.len()
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::InvalidInput(format!(
                "{name}: row {i} has {} entries, expected {dim}",
                row.len()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            hidden: 8,
            heads: 2,
            window: 4,
            ladder_len: 3,
            seq_views: 1,
            static_dim: 2,
            head_hidden: 8,
        }
    }

    fn random_input(cfg: &EncoderConfig, seed: u64) -> PredictorInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = |d: usize| -> Vec<Vec<f64>> {
            (0..cfg.window)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let err_seq = rows(cfg.ladder_len);
        let q_seq = rows(cfg.ladder_len);
        let s_seq = rows(1);
        let views = (0..cfg.seq_views).map(|_| rows(1)).collect();
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
        let static_feats = (0..cfg.static_dim).map(|_| rng2.random_range(-1.0..1.0)).collect();
        PredictorInput { err_seq, q_seq, s_seq, views, static_feats }
    }

    #[test]
    fn gru_zero_everything_gives_zero_output() {
        let mut store = ParamStore::new();
        for gate in ["z", "r", "h"] {
            store.insert(&format!("g.w{gate}"), Tensor::zeros(vec![4, 2])).unwrap();
            store.insert(&format!("g.u{gate}"), Tensor::zeros(vec![4, 4])).unwrap();
            store.insert(&format!("g.b{gate}"), Tensor::zeros(vec![4])).unwrap();
        }
        let mut tape = Tape::new();
        let rows: Vec<Var> = (0..3).map(|_| tape.leaf(Tensor::zeros(vec![2]))).collect();
        let h = gru_encode(&mut tape, &store, "g", &rows).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 4]);
    }

    #[test]
    fn gru_is_stateful() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        insert_gru_params(&mut store, &mut rng, "g", 2, 4).unwrap();
        let row = Tensor::vector(vec![0.7, -0.3]);
        let mut tape = Tape::new();
        let one = tape.leaf(row.clone());
        let h1 = gru_encode(&mut tape, &store, "g", &[one]).unwrap();
        let a = tape.leaf(row.clone());
        let b = tape.leaf(row);
        let h2 = gru_encode(&mut tape, &store, "g", &[a, b]).unwrap();
        assert_ne!(tape.value(h1).data(), tape.value(h2).data());
    }

    #[test]
    fn gru_matches_hand_rolled_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        insert_gru_params(&mut store, &mut rng, "g", 3, 5).unwrap();
        let steps: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();

        // independent reference implementation
        let get = |name: &str| store.get(name).unwrap().data().to_vec();
        let matvec = |m: &[f64], v: &[f64], rows: usize, cols: usize| -> Vec<f64> {
            (0..rows)
                .map(|i| (0..cols).map(|j| m[i * cols + j] * v[j]).sum())
                .collect()
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (wz, uz, bz) = (get("g.wz"), get("g.uz"), get("g.bz"));
        let (wr, ur, br) = (get("g.wr"), get("g.ur"), get("g.br"));
        let (wh, uh, bh) = (get("g.wh"), get("g.uh"), get("g.bh"));
        let mut h = vec![0.0; 5];
        for x in &steps {
            let zx = matvec(&wz, x, 5, 3);
            let zh = matvec(&uz, &h, 5, 5);
            let z: Vec<f64> = (0..5).map(|i| sig(zx[i] + zh[i] + bz[i])).collect();
            let rx = matvec(&wr, x, 5, 3);
            let rhv = matvec(&ur, &h, 5, 5);
            let r: Vec<f64> = (0..5).map(|i| sig(rx[i] + rhv[i] + br[i])).collect();
            let rjh: Vec<f64> = (0..5).map(|i| r[i] * h[i]).collect();
            let nx = matvec(&wh, x, 5, 3);
            let nh = matvec(&uh, &rjh, 5, 5);
            let n: Vec<f64> = (0..5).map(|i| (nx[i] + nh[i] + bh[i]).tanh()).collect();
            h = (0..5).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect();
        }

        let mut tape = Tape::new();
        let rows: Vec<Var> =
            steps.iter().map(|r| tape.leaf(Tensor::vector(r.clone()))).collect();
        let out = gru_encode(&mut tape, &store, "g", &rows).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&h) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn attention_single_key_is_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        insert_attention_params(&mut store, &mut rng, "att", 4).unwrap();
        let z = Tensor::vector(vec![0.3, -1.0, 0.5, 2.0]);
        let mut tape = Tape::new();
        let zq = tape.leaf(z.clone());
        let zk = tape.leaf(z.clone());
        let out = attention_fuse(&mut tape, &store, "att", 2, zq, &[zk]).unwrap();

        // softmax over a single key is 1, so the output must be Wo (Wv z) + bo
        let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> {
            (0..4).map(|i| (0..4).map(|j| m[i * 4 + j] * v[j]).sum()).collect()
        };
        let vz = matvec(store.get("att.wv").unwrap().data(), z.data());
        let mut expect = matvec(store.get("att.wo").unwrap().data(), &vz);
        for (e, b) in expect.iter_mut().zip(store.get("att.bo").unwrap().data()) {
            *e += b;
        }
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_symmetric_in_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        insert_attention_params(&mut store, &mut rng, "att", 8).unwrap();
        let embeds: Vec<Tensor> = (0..3)
            .map(|_| Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let query = Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());

        let run = |order: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new();
            let q = tape.leaf(query.clone());
            let kvs: Vec<Var> = order.iter().map(|&i| tape.leaf(embeds[i].clone())).collect();
            let out = attention_fuse(&mut tape, &store, "att", 4, q, &kvs).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_matches_hand_rolled_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let hidden = 6;
        let heads = 3;
        let mut store = ParamStore::new();
        insert_attention_params(&mut store, &mut rng, "att", hidden).unwrap();
        let query: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kvs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();

        let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> {
            (0..hidden)
                .map(|i| (0..hidden).map(|j| m[i * hidden + j] * v[j]).sum())
                .collect()
        };
        let q_all = matvec(store.get("att.wq").unwrap().data(), &query);
        let k_all: Vec<Vec<f64>> =
            kvs.iter().map(|kv| matvec(store.get("att.wk").unwrap().data(), kv)).collect();
        let v_all: Vec<Vec<f64>> =
            kvs.iter().map(|kv| matvec(store.get("att.wv").unwrap().data(), kv)).collect();
        let dk = hidden / heads;
        let mut stacked = Vec::new();
        for head in 0..heads {
            let lo = head * dk;
            let scores: Vec<f64> = k_all
                .iter()
                .map(|k| {
                    (0..dk).map(|i| q_all[lo + i] * k[lo + i]).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for i in 0..dk {
                let mut acc = 0.0;
                for (j, v) in v_all.iter().enumerate() {
                    acc += exps[j] / total * v[lo + i];
                }
                stacked.push(acc);
            }
        }
        let mut expect = matvec(store.get("att.wo").unwrap().data(), &stacked);
        for (e, b) in expect.iter_mut().zip(store.get("att.bo").unwrap().data()) {
            *e += b;
        }

        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::vector(query));
        let kv_vars: Vec<Var> =
            kvs.iter().map(|kv| tape.leaf(Tensor::vector(kv.clone()))).collect();
        let out = attention_fuse(&mut tape, &store, "att", heads, q, &kv_vars).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn monotone_head_prefix_sums_relu_outputs() {
        // zero first layer makes the pre-relu outputs equal to head.b2
        let mut store = ParamStore::new();
        store.insert("head.w1", Tensor::zeros(vec![4, 4])).unwrap();
        store.insert("head.b1", Tensor::zeros(vec![4])).unwrap();
        store.insert("head.w2", Tensor::zeros(vec![3, 4])).unwrap();
        store.insert("head.b2", Tensor::vector(vec![2.0, -1.0, 0.5])).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![4]));
        let (ladder, deltas) = monotone_head(&mut tape, &store, "head", z, 3).unwrap();
        assert_eq!(tape.value(deltas).data(), &[2.0, 0.0, 0.5]);
        assert_eq!(tape.value(ladder).data(), &[2.0, 2.0, 2.5]);
    }

    #[test]
    fn monotone_head_all_nonpositive_gives_zero_ladder() {
        let mut store = ParamStore::new();
        store.insert("head.w1", Tensor::zeros(vec![2, 2])).unwrap();
        store.insert("head.b1", Tensor::zeros(vec![2])).unwrap();
        store.insert("head.w2", Tensor::zeros(vec![3, 2])).unwrap();
        store.insert("head.b2", Tensor::vector(vec![-2.0, -0.1, 0.0])).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![2]));
        let (ladder, _) = monotone_head(&mut tape, &store, "head", z, 3).unwrap();
        assert_eq!(tape.value(ladder).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn monotone_head_single_entry() {
        let mut store = ParamStore::new();
        store.insert("head.w1", Tensor::zeros(vec![2, 2])).unwrap();
        store.insert("head.b1", Tensor::zeros(vec![2])).unwrap();
        store.insert("head.w2", Tensor::zeros(vec![1, 2])).unwrap();
        store.insert("head.b2", Tensor::vector(vec![1.25])).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![2]));
        let (ladder, _) = monotone_head(&mut tape, &store, "head", z, 1).unwrap();
        assert_eq!(tape.value(ladder).data(), &[1.25]);
    }

    #[test]
    fn forward_ladder_is_monotone_for_random_params() {
        let cfg = small_cfg();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let store = init_params(&cfg, &mut rng).unwrap();
            let input = random_input(&cfg, seed ^ 0xabcd);
            let (ladder, _) = predictor_values(&store, &cfg, &input).unwrap();
            assert!(ladder.iter().all(|&q| q >= 0.0), "negative ladder at seed {seed}");
            assert!(
                ladder.windows(2).all(|w| w[0] <= w[1]),
                "non-monotone ladder at seed {seed}: {ladder:?}"
            );
        }
    }

    #[test]
    fn forward_is_deterministic_and_input_sensitive() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let store = init_params(&cfg, &mut rng).unwrap();
        let input = random_input(&cfg, 1);
        let (a, _) = predictor_values(&store, &cfg, &input).unwrap();
        let (b, _) = predictor_values(&store, &cfg, &input).unwrap();
        assert_eq!(a, b);

        let mut other = input.clone();
        other.s_seq[0][0] += 1.0;
        let (c, _) = predictor_values(&store, &cfg, &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forward_is_static_feature_sensitive() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let store = init_params(&cfg, &mut rng).unwrap();
        let input = random_input(&cfg, 2);
        let (a, _) = predictor_values(&store, &cfg, &input).unwrap();
        let mut shifted = input.clone();
        shifted.static_feats[0] += 1.0; // the horizon slot
        let (b, _) = predictor_values(&store, &cfg, &shifted).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let store = init_params(&cfg, &mut rng).unwrap();
        let mut input = random_input(&cfg, 3);
        input.err_seq.pop();
        assert!(predictor_values(&store, &cfg, &input).is_err());
        let mut input2 = random_input(&cfg, 3);
        input2.static_feats.pop();
        assert!(predictor_values(&store, &cfg, &input2).is_err());
    }

    #[test]
    fn forward_runtime_smoke() {
        let cfg = EncoderConfig::default_for(11);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let store = init_params(&cfg, &mut rng).unwrap();
        let input = PredictorInput {
            err_seq: vec![vec![1.0; 11]; 32],
            q_seq: vec![vec![0.5; 11]; 32],
            s_seq: vec![vec![0.3]; 32],
            views: vec![vec![vec![0.1]; 32]],
            static_feats: vec![1.0],
        };
        predictor_values(&store, &cfg, &input).unwrap();
        let start = std::time::Instant::now();
        let iters = 50;
        for _ in 0..iters {
            predictor_values(&store, &cfg, &input).unwrap();
        }
        let per_step = start.elapsed().as_secs_f64() / iters as f64;
        assert!(per_step < 0.01, "forward pass took {per_step:.6}s per step");
    }
}
