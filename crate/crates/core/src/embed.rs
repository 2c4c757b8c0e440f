//! Input representations: token, token-type, 1-D position, patch and layout embeddings.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::doc::{BBox, NormBox, Page, Word, NORM_MAX};
use crate::error::{Error, Result};
use crate::graph::{patch_boxes, Grid};
use crate::numerics::params::truncated_normal;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const UNK: &str = "[UNK]";
pub const UNK_ID: usize = 0;

/// Token-type ids shared by the text and visual paths.
pub const TYPE_TEXT: usize = 0;
pub const TYPE_VISUAL: usize = 1;

/// Raw per-patch features: mean R, G, B, then center x, center y, width, height (page fractions).
pub const PATCH_FEATURES: usize = 7;

pub const INIT_STD: f64 = 0.02;

/// Splits text into lowercase pieces: maximal alphanumeric runs, and every
/// other non-space character on its own.
pub fn split_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Frequency-ranked vocabulary. Id 0 is always `[UNK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Config(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Most frequent pieces first, ties broken lexicographically; at most `size` entries including `[UNK]`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for p in split_pieces(t) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(p, _)| p != UNK).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(ranked.into_iter().take(size.saturating_sub(1)).map(|(p, _)| p));
        Self::from_tokens(tokens).expect("pieces are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, piece: &str) -> usize {
        self.index.get(piece).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in rank order.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    /// Box of the word each token came from.
    pub boxes: Vec<BBox>,
    pub word_index: Vec<usize>,
    /// True for the first token of each word; only these carry labels.
    pub first_of_word: Vec<bool>,
}

impl Tokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenizes words in reading order. Every word yields at least one token
/// (`[UNK]` when it has no pieces).
pub fn tokenize(words: &[Word], vocab: &Vocab, max_len: usize) -> Result<Tokens> {
    let mut t = Tokens { ids: Vec::new(), boxes: Vec::new(), word_index: Vec::new(), first_of_word: Vec::new() };
    for (wi, w) in words.iter().enumerate() {
        let mut pieces: Vec<usize> = split_pieces(&w.text).iter().map(|p| vocab.id(p)).collect();
        if pieces.is_empty() {
            pieces.push(UNK_ID);
        }
        for (k, id) in pieces.into_iter().enumerate() {
            t.ids.push(id);
            t.boxes.push(w.bbox);
            t.word_index.push(wi);
            t.first_of_word.push(k == 0);
        }
    }
    if t.len() > max_len {
        return Err(Error::Invalid(format!(
            "document has {} tokens but max_len is {max_len}; truncate the document before encoding",
            t.len()
        )));
    }
    Ok(t)
}

/// Patch grid with raw features, projected to model width by [`embed_visual`].
#[derive(Debug, Clone, PartialEq)]
pub struct VisualGrid {
    pub grid: Grid,
    /// `[W·H, PATCH_FEATURES]`, raster order.
    pub features: Tensor,
    pub boxes: Vec<BBox>,
}

/// Mean color per patch (zeros without an image) plus normalized patch geometry.
///
/// The page image, when present, is resolved relative to `base_dir`. Pixel
/// `(px, py)` of a `iw x ih` image belongs to column `px·W/iw` and row `py·H/ih`.
pub fn patch_features(page: &Page, grid: Grid, base_dir: Option<&Path>) -> Result<VisualGrid> {
    let colors = match page.image() {
        Some(rel) => {
            let path = base_dir.map_or_else(|| Path::new(rel).to_path_buf(), |d| d.join(rel));
            let img = image::open(&path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
                .to_rgb8();
            patch_mean_colors(&img, grid)
        }
        None => vec![[0.0; 3]; grid.len()],
    };
    from_colors(page, grid, colors)
}

pub(crate) fn from_colors(page: &Page, grid: Grid, colors: Vec<[f64; 3]>) -> Result<VisualGrid> {
    let (pw, ph) = (f64::from(page.width()), f64::from(page.height()));
    let boxes = patch_boxes(pw, ph, grid);
    let mut features = Tensor::zeros(&[grid.len(), PATCH_FEATURES]);
    for (i, (b, c)) in boxes.iter().zip(&colors).enumerate() {
        let row = features.row_mut(i);
        row[..3].copy_from_slice(c);
        row[3] = (b.x0 + b.x1) / 2.0 / pw;
        row[4] = (b.y0 + b.y1) / 2.0 / ph;
        row[5] = b.width() / pw;
        row[6] = b.height() / ph;
    }
    Ok(VisualGrid { grid, features, boxes })
}

/// Mean RGB in `[0, 1]` per patch, raster order.
pub fn patch_mean_colors(img: &image::RgbImage, grid: Grid) -> Vec<[f64; 3]> {
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    let mut sums = vec![[0.0f64; 3]; grid.len()];
    let mut counts = vec![0usize; grid.len()];
    for (x, y, px) in img.enumerate_pixels() {
        let c = x as usize * grid.cols / iw;
        let r = y as usize * grid.rows / ih;
        let k = r * grid.cols + c;
        for ch in 0..3 {
            sums[k][ch] += f64::from(px[ch]);
        }
        counts[k] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| {
            if n == 0 {
                [0.0; 3]
            } else {
                s.map(|v| v / 255.0 / n as f64)
            }
        })
        .collect()
}

/// Parameter ids of the embedding tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingTables {
    pub word: ParamId,
    pub token_type: ParamId,
    pub position: ParamId,
    pub x: ParamId,
    pub y: ParamId,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub d: usize,
}

/// Width of one coordinate slice of the layout embedding. Six slices are
/// concatenated; when `d` is not a multiple of six the remaining columns are zero.
pub fn coord_width(d: usize) -> usize {
    d / 6
}

impl EmbeddingTables {
    pub fn register(store: &mut ParamStore, vocab: usize, max_len: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = coord_width(d);
        let n = usize::from(NORM_MAX) + 1;
        Ok(Self {
            word: store.insert("emb.word", truncated_normal(&[vocab, d], INIT_STD, rng))?,
            token_type: store.insert("emb.type", truncated_normal(&[2, d], INIT_STD, rng))?,
            position: store.insert("emb.pos", truncated_normal(&[max_len, d], INIT_STD, rng))?,
            x: store.insert("emb.x", truncated_normal(&[n, c], INIT_STD, rng))?,
            y: store.insert("emb.y", truncated_normal(&[n, c], INIT_STD, rng))?,
            patch_w: store.insert("emb.patch.w", truncated_normal(&[PATCH_FEATURES, d], INIT_STD, rng))?,
            patch_b: store.insert("emb.patch.b", Tensor::zeros(&[d]))?,
            d,
        })
    }

    pub fn lookup(store: &ParamStore, d: usize) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        Ok(Self {
            word: get("emb.word")?,
            token_type: get("emb.type")?,
            position: get("emb.pos")?,
            x: get("emb.x")?,
            y: get("emb.y")?,
            patch_w: get("emb.patch.w")?,
            patch_b: get("emb.patch.b")?,
            d,
        })
    }

    fn max_len(&self, store: &ParamStore) -> usize {
        store.get(self.position).shape()[0]
    }
}

/// `[n, c]` table whose row `p` holds `amplitude·sin(p·ω_k)` and
/// `amplitude·cos(p·ω_k)` pairs, with wavelengths from 2π up to about `2π·n`.
pub fn sinusoidal_table(n: usize, c: usize, amplitude: f64) -> Tensor {
    let mut t = Tensor::zeros(&[n, c]);
    let pairs = c.div_ceil(2).max(1);
    for p in 0..n {
        let row = t.row_mut(p);
        for (j, v) in row.iter_mut().enumerate() {
            let k = (j / 2) as f64;
            let omega = (n as f64).powf(-k / (pairs as f64 - 1.0).max(1.0));
            let a = p as f64 * omega;
            *v = amplitude * if j % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

fn positions(n: usize, max_len: usize) -> Result<Vec<usize>> {
    if n > max_len {
        return Err(Error::Invalid(format!("position {} exceeds max_len {max_len}", n - 1)));
    }
    Ok((0..n).collect())
}

/// `E_w(w_i) + E_t(text) + E_p(i)`, positions from 0.
pub fn embed_text<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, t: &EmbeddingTables, ids: &[usize]) -> Result<Var> {
    let vocab = store.get(t.word).shape()[0];
    if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let pos = positions(ids.len(), t.max_len(store))?;
    let word = tape.param(store, t.word);
    let w = tape.gather_rows(word, ids)?;
    let ty = typed_rows(tape, store, t, TYPE_TEXT, ids.len())?;
    let p = tape.param(store, t.position);
    let p = tape.gather_rows(p, &pos)?;
    let s = tape.add(w, ty)?;
    tape.add(s, p)
}

fn typed_rows<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, t: &EmbeddingTables, kind: usize, n: usize) -> Result<Var> {
    let ty = tape.param(store, t.token_type);
    tape.gather_rows(ty, &vec![kind; n])
}

/// `I_i + E_t(visual) + E_p(i)` where `I` is the projected patch feature.
/// `text_len` is the length of the text block sharing the sequence.
pub fn embed_visual<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    t: &EmbeddingTables,
    grid: &VisualGrid,
    text_len: usize,
) -> Result<Var> {
    let n = grid.grid.len();
    let max_len = t.max_len(store);
    if n + text_len > max_len {
        return Err(Error::Invalid(format!(
            "{text_len} text tokens plus {n} patches exceed max_len {max_len}"
        )));
    }
    let feats = tape.constant(grid.features.clone());
    let w = tape.param(store, t.patch_w);
    let b = tape.param(store, t.patch_b);
    let proj = tape.matmul(feats, w)?;
    let proj = tape.add_row(proj, b)?;
    let ty = typed_rows(tape, store, t, TYPE_VISUAL, n)?;
    let p = tape.param(store, t.position);
    let p = tape.gather_rows(p, &positions(n, max_len)?)?;
    let s = tape.add(proj, ty)?;
    tape.add(s, p)
}

/// `Concat(E_X(x0), E_X(x1), E_X(x1−x0), E_Y(y0), E_Y(y1), E_Y(y1−y0))` per box.
pub fn embed_layout<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, t: &EmbeddingTables, boxes: &[NormBox]) -> Result<Var> {
    for b in boxes {
        NormBox::new(b.x0, b.y0, b.x1, b.y1)?;
        if b.x1 < b.x0 || b.y1 < b.y0 {
            return Err(Error::Invalid(format!("inverted normalized box {b:?}")));
        }
    }
    let col = |f: fn(&NormBox) -> u16| -> Vec<usize> { boxes.iter().map(|b| usize::from(f(b))).collect() };
    let ex = tape.param(store, t.x);
    let ey = tape.param(store, t.y);
    let mut parts = vec![
        tape.gather_rows(ex, &col(|b| b.x0))?,
        tape.gather_rows(ex, &col(|b| b.x1))?,
        tape.gather_rows(ex, &col(NormBox::width))?,
        tape.gather_rows(ey, &col(|b| b.y0))?,
        tape.gather_rows(ey, &col(|b| b.y1))?,
        tape.gather_rows(ey, &col(NormBox::height))?,
    ];
    let pad = t.d - 6 * coord_width(t.d);
    if pad > 0 {
        parts.push(tape.constant(Tensor::zeros(&[boxes.len(), pad])));
    }
    tape.concat_cols(&parts)
}

/// Fine-grained encoder input: text block (tokens) then visual block (patches),
/// each with its layout embedding added.
pub fn build_fine_input<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    t: &EmbeddingTables,
    ids: &[usize],
    text_boxes: &[NormBox],
    visual: &VisualGrid,
    visual_boxes: &[NormBox],
) -> Result<Var> {
    if ids.len() != text_boxes.len() || visual.grid.len() != visual_boxes.len() {
        return Err(Error::Shape {
            op: "build_fine_input",
            lhs: vec![ids.len(), visual.grid.len()],
            rhs: vec![text_boxes.len(), visual_boxes.len()],
        });
    }
    let v = embed_visual(tape, store, t, visual, ids.len())?;
    let vl = embed_layout(tape, store, t, visual_boxes)?;
    let visual_block = tape.add(v, vl)?;
    if ids.is_empty() {
        return Ok(visual_block);
    }
    let txt = embed_text(tape, store, t, ids)?;
    let tl = embed_layout(tape, store, t, text_boxes)?;
    let text_block = tape.add(txt, tl)?;
    tape.concat_rows(&[text_block, visual_block])
}
