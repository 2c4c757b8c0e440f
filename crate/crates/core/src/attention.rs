//! Multi-head self-attention with optional relative 1-D and 2-D position biases,
//! and the post-norm Transformer layer built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::doc::NormBox;
use crate::embed::INIT_STD;
use crate::error::{Error, Result};
use crate::numerics::params::truncated_normal;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_BUCKETS: usize = 32;
pub const DEFAULT_MAX_DISTANCE: usize = 1000;

/// Sign-symmetric bucket of a signed offset.
///
/// Non-negative offsets use buckets `0..buckets/2`, negative offsets
/// `buckets/2..buckets`. Within each half, magnitudes below `buckets/4` get
/// their own bucket; larger magnitudes are spaced logarithmically up to
/// `max_distance` and saturate beyond it.
pub fn rel_bucket(offset: i64, buckets: usize, max_distance: usize) -> usize {
    let half = (buckets / 2).max(1);
    let exact = (half / 2).max(1);
    let n = offset.unsigned_abs() as usize;
    let b = if n < exact {
        n
    } else if half <= exact || max_distance <= exact {
        half - 1
    } else {
        let scaled = (n as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln();
        (exact + (scaled * (half - exact) as f64) as usize).min(half - 1)
    };
    if offset < 0 { half + b } else { b }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    /// Keys carry no bias: a shared key offset shifts every score in a row
    /// equally and has no effect after softmax.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

fn lookup_id(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

fn projection(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<(ParamId, ParamId)> {
    let w = store.insert(format!("{name}.w"), truncated_normal(&[rows, cols], INIT_STD, rng))?;
    let b = store.insert(format!("{name}.b"), Tensor::zeros(&[cols]))?;
    Ok((w, b))
}

fn lookup_projection(store: &ParamStore, name: &str) -> Result<(ParamId, ParamId)> {
    Ok((lookup_id(store, &format!("{name}.w"))?, lookup_id(store, &format!("{name}.b"))?))
}

impl AttentionParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_heads(d, heads)?;
        let (wq, bq) = projection(store, &format!("{prefix}.q"), d, d, rng)?;
        let wk = store.insert(format!("{prefix}.k.w"), truncated_normal(&[d, d], INIT_STD, rng))?;
        let (wv, bv) = projection(store, &format!("{prefix}.v"), d, d, rng)?;
        let (wo, bo) = projection(store, &format!("{prefix}.o"), d, d, rng)?;
        Ok(Self { wq, bq, wk, wv, bv, wo, bo, heads })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let (wq, bq) = lookup_projection(store, &format!("{prefix}.q"))?;
        let wk = lookup_id(store, &format!("{prefix}.k.w"))?;
        let (wv, bv) = lookup_projection(store, &format!("{prefix}.v"))?;
        let (wo, bo) = lookup_projection(store, &format!("{prefix}.o"))?;
        Ok(Self { wq, bq, wk, wv, bv, wo, bo, heads })
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model width {d} is not divisible by {heads} heads")));
    }
    Ok(())
}

/// Per-head learnable bias tables, each `[buckets, heads]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasTables {
    pub r1d: ParamId,
    pub rx: ParamId,
    pub ry: ParamId,
    pub buckets_1d: usize,
    pub buckets_2d: usize,
    pub max_distance: usize,
    pub heads: usize,
}

impl BiasTables {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        heads: usize,
        buckets_1d: usize,
        buckets_2d: usize,
        max_distance: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            r1d: store.insert(format!("{prefix}.r1d"), truncated_normal(&[buckets_1d, heads], INIT_STD, rng))?,
            rx: store.insert(format!("{prefix}.rx"), truncated_normal(&[buckets_2d, heads], INIT_STD, rng))?,
            ry: store.insert(format!("{prefix}.ry"), truncated_normal(&[buckets_2d, heads], INIT_STD, rng))?,
            buckets_1d,
            buckets_2d,
            max_distance,
            heads,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, heads: usize, buckets_1d: usize, buckets_2d: usize, max_distance: usize) -> Result<Self> {
        Ok(Self {
            r1d: lookup_id(store, &format!("{prefix}.r1d"))?,
            rx: lookup_id(store, &format!("{prefix}.rx"))?,
            ry: lookup_id(store, &format!("{prefix}.ry"))?,
            buckets_1d,
            buckets_2d,
            max_distance,
            heads,
        })
    }
}

/// Bucket indices for every ordered pair `(i, j)`, row-major `[n, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeIndex {
    pub n: usize,
    pub b1d: Vec<usize>,
    pub bx: Vec<usize>,
    pub by: Vec<usize>,
}

impl RelativeIndex {
    /// Offsets are `j − i` for positions and top-left corners.
    pub fn new(boxes: &[NormBox], positions: &[usize], tables: &BiasTables) -> Result<Self> {
        if boxes.len() != positions.len() {
            return Err(Error::Shape { op: "relative_index", lhs: vec![boxes.len()], rhs: vec![positions.len()] });
        }
        let n = boxes.len();
        let mut idx = Self { n, b1d: Vec::with_capacity(n * n), bx: Vec::with_capacity(n * n), by: Vec::with_capacity(n * n) };
        for i in 0..n {
            for j in 0..n {
                let dp = positions[j] as i64 - positions[i] as i64;
                let dx = i64::from(boxes[j].x0) - i64::from(boxes[i].x0);
                let dy = i64::from(boxes[j].y0) - i64::from(boxes[i].y0);
                idx.b1d.push(rel_bucket(dp, tables.buckets_1d, tables.max_distance));
                idx.bx.push(rel_bucket(dx, tables.buckets_2d, tables.max_distance));
                idx.by.push(rel_bucket(dy, tables.buckets_2d, tables.max_distance));
            }
        }
        Ok(idx)
    }
}

/// One `[n, n]` bias matrix per head: `R_1D + R_X + R_Y` looked up by bucket.
pub fn bias_matrices<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, tables: &BiasTables, index: &RelativeIndex) -> Result<Vec<Var>> {
    let heads = tables.heads;
    let n = index.n;
    let r1d = tape.param(store, tables.r1d);
    let rx = tape.param(store, tables.rx);
    let ry = tape.param(store, tables.ry);
    (0..heads)
        .map(|h| {
            let flat = |b: &[usize]| b.iter().map(|&k| k * heads + h).collect::<Vec<_>>();
            let a = tape.gather_flat(r1d, flat(&index.b1d), &[n, n])?;
            let b = tape.gather_flat(rx, flat(&index.bx), &[n, n])?;
            let c = tape.gather_flat(ry, flat(&index.by), &[n, n])?;
            let ab = tape.add(a, b)?;
            tape.add(ab, c)
        })
        .collect()
}

fn affine<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

/// Multi-head attention. `bias`, when given, holds one pre-softmax `[n, n]`
/// term per head.
pub fn multi_head_attention<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    p: &AttentionParams,
    h: Var,
    bias: Option<&[Var]>,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Shape { op: "attention", lhs: shape, rhs: vec![] });
    }
    let d = shape[1];
    check_heads(d, p.heads)?;
    if let Some(b) = bias {
        if b.len() != p.heads {
            return Err(Error::Shape { op: "attention bias", lhs: vec![p.heads], rhs: vec![b.len()] });
        }
    }
    let dk = d / p.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = affine(tape, store, h, p.wq, p.bq)?;
    let wk = tape.param(store, p.wk);
    let k = tape.matmul(h, wk)?;
    let v = affine(tape, store, h, p.wv, p.bv)?;
    let mut outs = Vec::with_capacity(p.heads);
    for head in 0..p.heads {
        let qh = tape.slice_cols(q, head * dk, dk)?;
        let kh = tape.slice_cols(k, head * dk, dk)?;
        let vh = tape.slice_cols(v, head * dk, dk)?;
        let s = tape.matmul_t(qh, kh)?;
        let mut s = tape.scale(s, scale);
        if let Some(b) = bias {
            s = tape.add(s, b[head])?;
        }
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    affine(tape, store, cat, p.wo, p.bo)
}

/// Canonical scaled dot-product attention.
pub fn attention<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, p: &AttentionParams, h: Var) -> Result<Var> {
    multi_head_attention(tape, store, p, h, None)
}

/// Attention with relative position and top-left-corner biases.
pub fn spatial_mha<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    p: &AttentionParams,
    tables: &BiasTables,
    h: Var,
    boxes: &[NormBox],
    positions: &[usize],
) -> Result<Var> {
    if boxes.len() != tape.shape(h)[0] {
        return Err(Error::Shape { op: "spatial_mha", lhs: tape.shape(h).to_vec(), rhs: vec![boxes.len()] });
    }
    let index = RelativeIndex::new(boxes, positions, tables)?;
    let bias = bias_matrices(tape, store, tables, &index)?;
    multi_head_attention(tape, store, p, h, Some(&bias))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl LayerParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let attn = AttentionParams::register(store, &format!("{prefix}.attn"), d, heads, rng)?;
        let ln1_g = store.insert(format!("{prefix}.ln1.g"), Tensor::filled(&[d], 1.0))?;
        let ln1_b = store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]))?;
        let (ff1_w, ff1_b) = projection(store, &format!("{prefix}.ff1"), d, ffn, rng)?;
        let (ff2_w, ff2_b) = projection(store, &format!("{prefix}.ff2"), ffn, d, rng)?;
        let ln2_g = store.insert(format!("{prefix}.ln2.g"), Tensor::filled(&[d], 1.0))?;
        let ln2_b = store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]))?;
        Ok(Self { attn, ln1_g, ln1_b, ff1_w, ff1_b, ff2_w, ff2_b, ln2_g, ln2_b })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let (ff1_w, ff1_b) = lookup_projection(store, &format!("{prefix}.ff1"))?;
        let (ff2_w, ff2_b) = lookup_projection(store, &format!("{prefix}.ff2"))?;
        Ok(Self {
            attn: AttentionParams::lookup(store, &format!("{prefix}.attn"), heads)?,
            ln1_g: lookup_id(store, &format!("{prefix}.ln1.g"))?,
            ln1_b: lookup_id(store, &format!("{prefix}.ln1.b"))?,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            ln2_g: lookup_id(store, &format!("{prefix}.ln2.g"))?,
            ln2_b: lookup_id(store, &format!("{prefix}.ln2.b"))?,
        })
    }
}

/// Inverted dropout applied in training passes.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let mut mask = Tensor::zeros(tape.shape(x));
        for m in mask.data_mut() {
            *m = if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
        }
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

/// `LN2(h1 + FFN(h1))` with `h1 = LN1(H + MHA(H))`; FFN uses GELU.
pub fn transformer_layer<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    p: &LayerParams,
    h: Var,
    bias: Option<&[Var]>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let mut a = multi_head_attention(tape, store, &p.attn, h, bias)?;
    if let Some(d) = dropout.as_deref_mut() {
        a = d.apply(tape, a)?;
    }
    let r1 = tape.add(h, a)?;
    let (g1, b1) = (tape.param(store, p.ln1_g), tape.param(store, p.ln1_b));
    let h1 = tape.layer_norm(r1, g1, b1)?;
    let f = affine(tape, store, h1, p.ff1_w, p.ff1_b)?;
    let f = tape.gelu(f);
    let mut f = affine(tape, store, f, p.ff2_w, p.ff2_b)?;
    if let Some(d) = dropout.as_deref_mut() {
        f = d.apply(tape, f)?;
    }
    let r2 = tape.add(h1, f)?;
    let (g2, b2) = (tape.param(store, p.ln2_g), tape.param(store, p.ln2_b));
    tape.layer_norm(r2, g2, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::uniform;
    use crate::numerics::{grad_check, GradCheckOptions};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn setup(d: usize, heads: usize) -> (ParamStore, AttentionParams, BiasTables) {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let p = AttentionParams::register(&mut store, "a", d, heads, &mut r).unwrap();
        // Larger weights than the default init so attention is far from uniform.
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = uniform(&shape, -0.5, 0.5, &mut r);
        }
        let t = BiasTables::register(&mut store, "bias", heads, 32, 32, 1000, &mut r).unwrap();
        (store, p, t)
    }

    fn random_boxes(n: usize, seed: u64) -> Vec<NormBox> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| {
                let x0 = r.random_range(0..900u16);
                let y0 = r.random_range(0..900u16);
                NormBox::new(x0, y0, x0 + r.random_range(0..80u16), y0 + r.random_range(0..80u16)).unwrap()
            })
            .collect()
    }

    #[test]
    fn bucket_fixed_points_and_sign() {
        assert_eq!(rel_bucket(0, 32, 1000), 0);
        assert_ne!(rel_bucket(1, 32, 1000), rel_bucket(-1, 32, 1000));
        for o in 0..8 {
            assert_eq!(rel_bucket(o, 32, 1000), o as usize);
            assert_eq!(rel_bucket(-o - 1, 32, 1000), 16 + o as usize + 1);
        }
        assert_eq!(rel_bucket(1_000_000, 32, 1000), 15);
        assert_eq!(rel_bucket(-1_000_000, 32, 1000), 31);
        assert!(rel_bucket(5, 2, 1000) < 2 && rel_bucket(-5, 2, 1000) < 2);
    }

    #[test]
    fn buckets_are_monotone_per_sign() {
        for buckets in [4, 8, 32, 64] {
            let mut last = (0, buckets / 2);
            for o in 0..=2000i64 {
                let (p, n) = (rel_bucket(o, buckets, 1000), rel_bucket(-o, buckets, 1000));
                assert!(p >= last.0 && p < buckets / 2);
                if o > 0 {
                    assert!(n >= last.1 && n < buckets);
                    last.1 = n;
                }
                last.0 = p;
            }
        }
    }

    /// Per-element loops over the same parameters.
    fn naive_attention(store: &ParamStore, p: &AttentionParams, x: &Tensor, bias: Option<&[Tensor]>) -> Tensor {
        let (n, d) = (x.rows(), x.cols());
        let dk = d / p.heads;
        let proj = |w: ParamId, b: ParamId, inp: &Tensor| {
            let (w, b) = (store.get(w), store.get(b));
            let mut out = Tensor::zeros(&[inp.rows(), w.cols()]);
            for i in 0..inp.rows() {
                for j in 0..w.cols() {
                    let mut s = b.data()[j];
                    for k in 0..inp.cols() {
                        s += inp.at(i, k) * w.at(k, j);
                    }
                    out.row_mut(i)[j] = s;
                }
            }
            out
        };
        let k = crate::numerics::matmul(x, store.get(p.wk)).unwrap();
        let (q, v) = (proj(p.wq, p.bq, x), proj(p.wv, p.bv, x));
        let mut cat = Tensor::zeros(&[n, d]);
        for h in 0..p.heads {
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for (j, s) in scores.iter_mut().enumerate() {
                    for c in 0..dk {
                        *s += q.at(i, h * dk + c) * k.at(j, h * dk + c);
                    }
                    *s /= (dk as f64).sqrt();
                    if let Some(b) = bias {
                        *s += b[h].at(i, j);
                    }
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for c in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += (scores[j] - m).exp() / z * v.at(j, h * dk + c);
                    }
                    cat.row_mut(i)[h * dk + c] = acc;
                }
            }
        }
        proj(p.wo, p.bo, &cat)
    }

    fn run_attention(store: &ParamStore, p: &AttentionParams, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let y = attention(&mut tape, store, p, h).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn attention_matches_naive_loops() {
        let (store, p, _) = setup(8, 2);
        let x = uniform(&[4, 8], -1.0, 1.0, &mut rng(5));
        let got = run_attention(&store, &p, &x);
        assert!(got.max_abs_diff(&naive_attention(&store, &p, &x, None)) < 1e-12);
    }

    #[test]
    fn single_row_is_projected_value() {
        let (store, p, _) = setup(8, 2);
        let x = uniform(&[1, 8], -1.0, 1.0, &mut rng(6));
        let got = run_attention(&store, &p, &x);
        let mut tape = Tape::new();
        let h = tape.constant(x);
        let v = affine(&mut tape, &store, h, p.wv, p.bv).unwrap();
        let o = affine(&mut tape, &store, v, p.wo, p.bo).unwrap();
        assert!(got.max_abs_diff(tape.value(o)) < 1e-12);
    }

    #[test]
    fn identical_keys_average_values() {
        let (mut store, p, _) = setup(4, 1);
        // W_k = 0: every key is zero, so attention is uniform.
        store.get_mut(p.wk).data_mut().fill(0.0);
        *store.get_mut(p.wo) = Tensor::eye(4);
        store.get_mut(p.bo).data_mut().fill(0.0);
        let x = uniform(&[3, 4], -1.0, 1.0, &mut rng(7));
        let got = run_attention(&store, &p, &x);
        let v = crate::numerics::matmul(&x, store.get(p.wv)).unwrap();
        for c in 0..4 {
            let mean = (0..3).map(|j| v.at(j, c) + store.get(p.bv).data()[c]).sum::<f64>() / 3.0;
            for i in 0..3 {
                assert!((got.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    fn run_spatial(store: &ParamStore, p: &AttentionParams, t: &BiasTables, x: &Tensor, boxes: &[NormBox]) -> Tensor {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let pos: Vec<usize> = (0..boxes.len()).collect();
        let y = spatial_mha(&mut tape, store, p, t, h, boxes, &pos).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_bias_tables_reduce_to_attention() {
        let (mut store, p, t) = setup(8, 2);
        for id in [t.r1d, t.rx, t.ry] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = uniform(&[6, 8], -1.0, 1.0, &mut rng(8));
        let diff = run_spatial(&store, &p, &t, &x, &random_boxes(6, 9)).max_abs_diff(&run_attention(&store, &p, &x));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn rigid_translation_is_exact() {
        let (store, p, t) = setup(8, 2);
        let x = uniform(&[6, 8], -1.0, 1.0, &mut rng(10));
        let boxes = random_boxes(6, 11);
        let moved: Vec<NormBox> = boxes
            .iter()
            .map(|b| NormBox::new(b.x0 + 7, b.y0 + 11, b.x1 + 7, b.y1 + 11).unwrap())
            .collect();
        assert_eq!(run_spatial(&store, &p, &t, &x, &boxes), run_spatial(&store, &p, &t, &x, &moved));
    }

    #[test]
    fn spatial_matches_naive_with_bias() {
        let (store, p, t) = setup(8, 2);
        let x = uniform(&[5, 8], -1.0, 1.0, &mut rng(12));
        let boxes = random_boxes(5, 13);
        let index = RelativeIndex::new(&boxes, &[0, 1, 2, 3, 4], &t).unwrap();
        let bias: Vec<Tensor> = (0..2)
            .map(|h| {
                let mut m = Tensor::zeros(&[5, 5]);
                for k in 0..25 {
                    m.data_mut()[k] = store.get(t.r1d).at(index.b1d[k], h)
                        + store.get(t.rx).at(index.bx[k], h)
                        + store.get(t.ry).at(index.by[k], h);
                }
                m
            })
            .collect();
        let got = run_spatial(&store, &p, &t, &x, &boxes);
        assert!(got.max_abs_diff(&naive_attention(&store, &p, &x, Some(&bias))) < 1e-12);
    }

    #[test]
    fn two_token_hand_computed() {
        // d = 1, one head, identity projections: scores are x_i x_j.
        let mut store = ParamStore::new();
        let mut r = rng(0);
        let p = AttentionParams::register(&mut store, "a", 1, 1, &mut r).unwrap();
        for w in [p.wq, p.wk, p.wv, p.wo] {
            *store.get_mut(w) = Tensor::eye(1);
        }
        let t = BiasTables::register(&mut store, "bias", 1, 4, 4, 1000, &mut r).unwrap();
        for id in [t.r1d, t.rx, t.ry] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        // Offset +1 → bucket 1 gets 0.5; offset −1 → bucket 3 gets −0.25.
        store.get_mut(t.r1d).data_mut()[1] = 0.5;
        store.get_mut(t.r1d).data_mut()[3] = -0.25;
        let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = NormBox::default();
        let got = run_spatial(&store, &p, &t, &x, &[b, b]);
        // row 0: scores [1, 2 + 0.5]; row 1: scores [2 − 0.25, 4]
        let p0 = 1.0 / (1.0 + (1.5f64).exp());
        let p1 = 1.0 / (1.0 + (2.25f64).exp());
        assert!((got.at(0, 0) - (p0 * 1.0 + (1.0 - p0) * 2.0)).abs() < 1e-12);
        assert!((got.at(1, 0) - (p1 * 1.0 + (1.0 - p1) * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_after_bias() {
        let (store, p, t) = setup(8, 2);
        let boxes = random_boxes(7, 14);
        let index = RelativeIndex::new(&boxes, &(0..7).collect::<Vec<_>>(), &t).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(uniform(&[7, 8], -1.0, 1.0, &mut rng(15)));
        let bias = bias_matrices(&mut tape, &store, &t, &index).unwrap();
        let q = affine(&mut tape, &store, x, p.wq, p.bq).unwrap();
        let s = tape.matmul_t(q, q).unwrap();
        let s = tape.add(s, bias[0]).unwrap();
        let a = tape.softmax(s);
        for i in 0..7 {
            assert!((tape.value(a).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_score_shift_is_invisible() {
        let (store, p, _) = setup(8, 2);
        let x = uniform(&[4, 8], -1.0, 1.0, &mut rng(16));
        let run = |shift: f64| {
            let mut tape = Tape::new();
            let h = tape.constant(x.clone());
            let b: Vec<Var> = (0..2).map(|_| tape.constant(Tensor::filled(&[4, 4], shift))).collect();
            let y = multi_head_attention(&mut tape, &store, &p, h, Some(&b)).unwrap();
            tape.value(y).clone()
        };
        assert!(run(0.0).max_abs_diff(&run(37.5)) < 1e-12);
    }

    fn layer_setup(d: usize) -> (ParamStore, LayerParams) {
        let mut store = ParamStore::new();
        let l = LayerParams::register(&mut store, "layer", d, 2, 4 * d, &mut rng(2)).unwrap();
        (store, l)
    }

    #[test]
    fn zero_output_projections_give_double_norm() {
        let (mut store, l) = layer_setup(8);
        for id in [l.attn.wo, l.attn.bo, l.ff2_w, l.ff2_b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = uniform(&[5, 8], -1.0, 1.0, &mut rng(3));
        let mut tape = Tape::new();
        let h = tape.constant(x);
        let y = transformer_layer(&mut tape, &store, &l, h, None, None).unwrap();
        let (g, b) = (tape.param(&store, l.ln1_g), tape.param(&store, l.ln1_b));
        let n1 = tape.layer_norm(h, g, b).unwrap();
        let n2 = tape.layer_norm(n1, g, b).unwrap();
        assert_eq!(tape.shape(y), &[5, 8]);
        assert!(tape.value(y).max_abs_diff(tape.value(n2)) < 1e-12);
    }

    #[test]
    fn layer_gradcheck() {
        let (mut store, l) = layer_setup(8);
        let mut r = rng(8);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = uniform(&shape, -0.5, 0.5, &mut r);
        }
        let x = store.insert("x", uniform(&[4, 8], -1.0, 1.0, &mut rng(4))).unwrap();
        let t = BiasTables::register(&mut store, "bias", 2, 8, 8, 100, &mut rng(5)).unwrap();
        let boxes = random_boxes(4, 6);
        let probe = uniform(&[4, 8], -1.0, 1.0, &mut rng(7));
        let report = grad_check(
            &store,
            &[],
            |tape, s| {
                let h = tape.param(s, x);
                let index = RelativeIndex::new(&boxes, &[0, 1, 2, 3], &t)?;
                let bias = bias_matrices(tape, s, &t, &index)?;
                let y = transformer_layer(tape, s, &l, h, Some(&bias), None)?;
                let w = tape.constant(probe.clone());
                let m = tape.mul(y, w)?;
                Ok(tape.sum(m))
            },
            &GradCheckOptions { min_magnitude: 1e-4, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.worst);
        assert!(report.checked > 10 * report.unresolved, "{} vs {}", report.checked, report.unresolved);
    }

    #[test]
    fn dropout_is_identity_at_zero_and_scales_kept_units() {
        let mut r = rng(9);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[10, 10], 1.0));
        let mut off = Dropout { p: 0.0, rng: &mut r };
        assert_eq!(off.apply(&mut tape, x).unwrap(), x);
        let mut on = Dropout { p: 0.5, rng: &mut r };
        let y = on.apply(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
