//! The multi-grained encoder: fine-grained spatial encoding, aggregation into
//! segment and region nodes with common-sense enhancement, coarse-grained
//! encoding, and fusion back onto every fine node.

pub mod commonsense;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{bias_matrices, transformer_layer, BiasTables, Dropout, LayerParams, RelativeIndex};
use crate::cluster::ClusterParams;
use crate::doc::{NormBox, Page};
use crate::embed::{self, EmbeddingTables, Tokens, VisualGrid, Vocab, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{build_graph, DocumentGraph, Grid};
use crate::numerics::params::truncated_normal;
use crate::numerics::{checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tasks::BioTagSet;
pub use commonsense::{RulePack, DEFAULT_INVENTORY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain sum of child rows.
    #[default]
    Sum,
    /// Sum divided by the child count.
    Mean,
}

/// Initial values of the coordinate tables `emb.x` and `emb.y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayoutInit {
    /// Truncated normal, like every other table.
    #[default]
    Normal,
    /// Sine/cosine features of the coordinate, so nearby coordinates start
    /// with similar rows.
    Sinusoidal,
}

/// A user-supplied common-sense detector appended after the built-in ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomRule {
    pub name: String,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Spatial-aware layers in the fine-grained encoder.
    pub fine_layers: usize,
    /// Canonical layers in the coarse-grained encoder; 0 passes coarse inputs through.
    pub coarse_layers: usize,
    /// Feed-forward inner width; 0 means `4·d`.
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Patch grid as `[columns, rows]`.
    pub grid: [usize; 2],
    /// Built-in common-sense categories, in bit order.
    pub common_sense: Vec<String>,
    pub custom_rules: Vec<CustomRule>,
    /// Inner width of the common-sense table; 0 means `d`.
    pub d_c: usize,
    pub radius: f64,
    pub min_pts: usize,
    pub dropout: f64,
    pub seed: u64,
    pub rel_1d_buckets: usize,
    pub rel_2d_buckets: usize,
    pub max_distance: usize,
    pub aggregation: Aggregation,
    pub layout_init: LayoutInit,
    /// Skip aggregation, coarse encoding and fusion: the output is the fine encoder's.
    pub bypass_aggregation: bool,
    pub entity_types: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            fine_layers: 2,
            coarse_layers: 1,
            ffn: 0,
            vocab_size: 8192,
            max_len: 512,
            grid: [7, 7],
            common_sense: DEFAULT_INVENTORY.iter().map(|s| s.to_string()).collect(),
            custom_rules: Vec::new(),
            d_c: 0,
            radius: crate::cluster::DEFAULT_RADIUS,
            min_pts: crate::cluster::DEFAULT_MIN_PTS,
            dropout: 0.0,
            seed: 0,
            rel_1d_buckets: crate::attention::DEFAULT_BUCKETS,
            rel_2d_buckets: crate::attention::DEFAULT_BUCKETS,
            max_distance: crate::attention::DEFAULT_MAX_DISTANCE,
            aggregation: Aggregation::Sum,
            layout_init: LayoutInit::Normal,
            bypass_aggregation: false,
            entity_types: BioTagSet::default().types().to_vec(),
        }
    }
}

pub const MAX_COARSE_LAYERS: usize = 5;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d < 6 {
            return bad(format!("d must be at least 6, got {}", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.fine_layers == 0 {
            return bad("fine_layers must be at least 1".into());
        }
        if self.coarse_layers > MAX_COARSE_LAYERS {
            return bad(format!("coarse_layers must be in 0..={MAX_COARSE_LAYERS}, got {}", self.coarse_layers));
        }
        if self.grid[0] == 0 || self.grid[1] == 0 {
            return bad(format!("grid must be at least 1x1, got {}x{}", self.grid[0], self.grid[1]));
        }
        if self.max_len <= self.grid[0] * self.grid[1] {
            return bad(format!("max_len {} leaves no room for text next to {} patches", self.max_len, self.grid[0] * self.grid[1]));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        for (name, b) in [("rel_1d_buckets", self.rel_1d_buckets), ("rel_2d_buckets", self.rel_2d_buckets)] {
            if b < 2 || b % 2 != 0 {
                return bad(format!("{name} must be even and at least 2, got {b}"));
            }
        }
        if self.max_distance == 0 {
            return bad("max_distance must be positive".into());
        }
        if !(self.radius.is_finite() && self.radius >= 0.0) {
            return bad(format!("radius must be finite and non-negative, got {}", self.radius));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.entity_types.is_empty() {
            return bad("entity_types must not be empty".into());
        }
        BioTagSet::new(&self.entity_types)?;
        self.rule_pack()?;
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn == 0 { 4 * self.d } else { self.ffn }
    }

    pub fn common_sense_width(&self) -> usize {
        if self.d_c == 0 { self.d } else { self.d_c }
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.grid[0], self.grid[1])
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams::new(self.radius, self.min_pts)
    }

    pub fn rule_pack(&self) -> Result<RulePack> {
        let mut pack = RulePack::builtin(&self.common_sense)?;
        for r in &self.custom_rules {
            pack.push(&r.name, &r.pattern)?;
        }
        Ok(pack)
    }

    /// Size K of the common-sense inventory.
    pub fn num_common_sense(&self) -> usize {
        self.common_sense.len() + self.custom_rules.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

/// Parameter ids of every model component.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embeddings: EmbeddingTables,
    pub fine_bias: BiasTables,
    pub fine: Vec<LayerParams>,
    /// `E_c` `[K, d_c]` and `W^C` `[d_c, d]`; absent when K = 0.
    pub common_sense: Option<(ParamId, ParamId)>,
    pub coarse: Vec<LayerParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub tags: BioTagSet,
    pub rules: RulePack,
    pub params: ModelParams,
}

/// Checkpoint metadata stored next to the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn missing(name: &str) -> Error {
    Error::Checkpoint(format!("missing parameter {name}"))
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: ModelConfig, vocab: Vocab) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let embeddings = EmbeddingTables::register(&mut store, c.vocab_size, c.max_len, c.d, &mut rng)?;
        if c.layout_init == LayoutInit::Sinusoidal {
            for id in [embeddings.x, embeddings.y] {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = embed::sinusoidal_table(shape[0], shape[1], INIT_STD * std::f64::consts::SQRT_2);
            }
        }
        let fine_bias =
            BiasTables::register(&mut store, "fine.bias", c.heads, c.rel_1d_buckets, c.rel_2d_buckets, c.max_distance, &mut rng)?;
        let fine = (0..c.fine_layers)
            .map(|i| LayerParams::register(&mut store, &format!("fine.{i}"), c.d, c.heads, c.ffn_width(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let k = c.num_common_sense();
        let common_sense = if k > 0 {
            let dc = c.common_sense_width();
            let table = store.insert("cs.table", truncated_normal(&[k, dc], INIT_STD, &mut rng))?;
            let mut proj = truncated_normal(&[dc, c.d], INIT_STD, &mut rng);
            if dc == c.d {
                for i in 0..dc {
                    proj.row_mut(i)[i] += 1.0;
                }
            }
            Some((table, store.insert("cs.proj", proj)?))
        } else {
            None
        };
        let coarse = (0..c.coarse_layers)
            .map(|i| LayerParams::register(&mut store, &format!("coarse.{i}"), c.d, c.heads, c.ffn_width(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let tags = BioTagSet::new(&c.entity_types)?;
        let head_w = store.insert("head.w", truncated_normal(&[c.d, tags.len()], INIT_STD, &mut rng))?;
        let head_b = store.insert("head.b", Tensor::zeros(&[tags.len()]))?;
        let rules = c.rule_pack()?;
        let params = ModelParams { embeddings, fine_bias, fine, common_sense, coarse, head_w, head_b };
        Ok((Self { config, vocab, tags, rules, params }, store))
    }

    /// Binds to parameters already in `store` by name. Extra parameters are
    /// ignored, so a reduced configuration can share a larger model's store.
    pub fn from_store(config: ModelConfig, vocab: Vocab, store: &ParamStore) -> Result<Self> {
        let (template, fresh) = Self::init(config, vocab)?;
        for (_, name, t) in fresh.iter() {
            let got = store.by_name(name).ok_or_else(|| missing(name))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, configuration expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let c = &template.config;
        let id = |n: &str| store.id(n).ok_or_else(|| missing(n));
        let params = ModelParams {
            embeddings: EmbeddingTables::lookup(store, c.d)?,
            fine_bias: BiasTables::lookup(store, "fine.bias", c.heads, c.rel_1d_buckets, c.rel_2d_buckets, c.max_distance)?,
            fine: (0..c.fine_layers)
                .map(|i| LayerParams::lookup(store, &format!("fine.{i}"), c.heads))
                .collect::<Result<_>>()?,
            common_sense: if c.num_common_sense() > 0 { Some((id("cs.table")?, id("cs.proj")?)) } else { None },
            coarse: (0..c.coarse_layers)
                .map(|i| LayerParams::lookup(store, &format!("coarse.{i}"), c.heads))
                .collect::<Result<_>>()?,
            head_w: id("head.w")?,
            head_b: id("head.b")?,
        };
        Ok(Self { params, ..template })
    }

    pub fn meta(&self, extra: serde_json::Value) -> CheckpointMeta {
        CheckpointMeta { model: self.config.clone(), vocab: self.vocab.tokens().to_vec(), extra }
    }

    pub fn save(&self, path: &Path, store: &ParamStore, extra: serde_json::Value) -> Result<()> {
        checkpoint::save(path, store, serde_json::to_value(self.meta(extra))?)
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore, CheckpointMeta)> {
        let (store, meta) = checkpoint::load(path)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("checkpoint metadata: {e}")))?;
        let vocab = Vocab::from_tokens(meta.vocab.clone())?;
        let model = Self::from_store(meta.model.clone(), vocab, &store)?;
        Ok((model, store, meta))
    }
}

/// Everything about one page that does not depend on parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: DocumentGraph,
    pub tokens: Tokens,
    pub token_boxes: Vec<NormBox>,
    pub visual: VisualGrid,
    pub patch_boxes: Vec<NormBox>,
    /// Segment boxes then region boxes.
    pub coarse_boxes: Vec<NormBox>,
    /// Segment of each token.
    pub token_parent: Vec<usize>,
    /// `[Z, K]` multi-hot rows, one per segment.
    pub common_sense: Tensor,
    pub fine_index: RelativeIndex,
    /// Tag id for the first token of each labeled word, `None` elsewhere.
    pub targets: Option<Vec<Option<usize>>>,
}

impl Prepared {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_segments(&self) -> usize {
        self.graph.page().segments().len()
    }

    pub fn num_regions(&self) -> usize {
        self.graph.regions().len()
    }

    /// Coarse row of every fine row: segment `s` is row `s`, region `r` is row `Z + r`.
    pub fn fine_to_coarse(&self) -> Vec<usize> {
        let z = self.num_segments();
        self.token_parent
            .iter()
            .copied()
            .chain(self.graph.visual_parent().iter().map(|r| z + r))
            .collect()
    }
}

/// Tape handles of every stage, for inspection.
#[derive(Debug, Clone, Copy)]
pub struct Stages {
    pub fine_input: Var,
    pub fine_output: Var,
    pub aggregated_text: Option<Var>,
    pub aggregated_visual: Option<Var>,
    pub common_sense: Option<Var>,
    pub coarse_input: Option<Var>,
    pub coarse_output: Option<Var>,
    pub output: Var,
}

impl Stages {
    /// Shape and Frobenius norm of every computed stage.
    pub fn summary(&self, tape: &Tape<'_>) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        let entries = [
            ("fine_input", Some(self.fine_input)),
            ("fine_output", Some(self.fine_output)),
            ("aggregated_text", self.aggregated_text),
            ("aggregated_visual", self.aggregated_visual),
            ("common_sense", self.common_sense),
            ("coarse_input", self.coarse_input),
            ("coarse_output", self.coarse_output),
            ("output", Some(self.output)),
        ];
        for (name, v) in entries {
            if let Some(v) = v {
                let t = tape.value(v);
                m.insert(name.into(), serde_json::json!({ "shape": t.shape(), "norm": t.norm() }));
            }
        }
        serde_json::Value::Object(m)
    }
}

/// Sums (or averages) fine rows into their coarse parents: tokens into
/// segments, patches into regions. Childless regions get zero rows.
pub fn aggregate(tape: &mut Tape<'_>, fine: Var, doc: &Prepared, mode: Aggregation) -> Result<(Var, Var)> {
    let l = doc.num_tokens();
    let p = doc.visual.grid.len();
    let rows = tape.shape(fine)[0];
    if rows != l + p {
        return Err(Error::Shape { op: "aggregate", lhs: vec![rows], rhs: vec![l + p] });
    }
    let pool = |tape: &mut Tape<'_>, idx: Vec<usize>, parents: &[usize], n: usize| -> Result<Var> {
        let x = tape.gather_rows(fine, &idx)?;
        let s = tape.scatter_rows(x, parents, n)?;
        match mode {
            Aggregation::Sum => Ok(s),
            Aggregation::Mean => {
                let mut counts = vec![0.0; n];
                for &q in parents {
                    counts[q] += 1.0;
                }
                let inv: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
                tape.row_scale(s, &inv)
            }
        }
    };
    let text = pool(tape, (0..l).collect(), &doc.token_parent, doc.num_segments())?;
    let visual = pool(tape, (l..l + p).collect(), doc.graph.visual_parent(), doc.num_regions())?;
    Ok((text, visual))
}

/// `h_i = fine_i + coarse_{parent(i)}` for every fine row.
pub fn fuse(tape: &mut Tape<'_>, fine: Var, coarse: Var, doc: &Prepared) -> Result<Var> {
    let parents = doc.fine_to_coarse();
    let rows = tape.shape(coarse)[0];
    if let Some(bad) = parents.iter().find(|&&q| q >= rows) {
        return Err(Error::Invalid(format!("fine node parent {bad} outside {rows} coarse rows")));
    }
    let lifted = tape.gather_rows(coarse, &parents)?;
    tape.add(fine, lifted)
}

impl Model {
    pub fn prepare(&self, page: &Page, base_dir: Option<&Path>) -> Result<Prepared> {
        let graph = build_graph(page, &self.config.cluster_params(), self.config.grid())?;
        self.prepare_graph(graph, base_dir)
    }

    pub fn prepare_graph(&self, graph: DocumentGraph, base_dir: Option<&Path>) -> Result<Prepared> {
        let page = graph.page();
        let tokens = embed::tokenize(page.words(), &self.vocab, self.config.max_len)?;
        let token_boxes: Vec<NormBox> = tokens.boxes.iter().map(|b| page.normalize(b)).collect();
        let visual = embed::patch_features(page, graph.grid(), base_dir)?;
        let patch_boxes: Vec<NormBox> = visual.boxes.iter().map(|b| page.normalize(b)).collect();
        let coarse_boxes: Vec<NormBox> =
            graph.segment_boxes().iter().chain(graph.region_boxes().iter()).map(|b| page.normalize(b)).collect();
        let token_parent: Vec<usize> = tokens.word_index.iter().map(|&w| page.words()[w].segment_id).collect();
        let k = self.rules.len();
        let mut common_sense = Tensor::zeros(&[page.segments().len(), k]);
        for (i, s) in page.segments().iter().enumerate() {
            common_sense.row_mut(i).copy_from_slice(&self.rules.detect(&s.text));
        }
        let fine_boxes: Vec<NormBox> = token_boxes.iter().chain(&patch_boxes).copied().collect();
        let positions: Vec<usize> = (0..fine_boxes.len()).collect();
        let fine_index = RelativeIndex::new(&fine_boxes, &positions, &self.params.fine_bias)?;
        let targets = match page.labels() {
            Some(labels) => Some(
                tokens
                    .word_index
                    .iter()
                    .zip(&tokens.first_of_word)
                    .map(|(&w, &first)| if first { self.tags.id(&labels[w]).map(Some) } else { Ok(None) })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Prepared {
            graph,
            tokens,
            token_boxes,
            visual,
            patch_boxes,
            coarse_boxes,
            token_parent,
            common_sense,
            fine_index,
            targets,
        })
    }

    pub fn fine_input<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, doc: &Prepared) -> Result<Var> {
        embed::build_fine_input(
            tape,
            store,
            &self.params.embeddings,
            &doc.tokens.ids,
            &doc.token_boxes,
            &doc.visual,
            &doc.patch_boxes,
        )
    }

    /// The spatial-aware layers; bias matrices are shared by all of them.
    pub fn fine_encode<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        input: Var,
        doc: &Prepared,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let bias = bias_matrices(tape, store, &self.params.fine_bias, &doc.fine_index)?;
        let mut h = input;
        for layer in &self.params.fine {
            h = transformer_layer(tape, store, layer, h, Some(&bias), dropout.as_deref_mut())?;
        }
        Ok(h)
    }

    /// `C·E_c·W^C`, one row per segment; `None` when the inventory is empty.
    pub fn common_sense_embed<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, bits: &Tensor) -> Result<Option<Var>> {
        let Some((table, proj)) = self.params.common_sense else {
            return Ok(None);
        };
        let c = tape.constant(bits.clone());
        let e = tape.param(store, table);
        let w = tape.param(store, proj);
        let ce = tape.matmul(c, e)?;
        Ok(Some(tape.matmul(ce, w)?))
    }

    /// Segment rows then region rows, each plus the shared layout embedding.
    pub fn coarse_input<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        text: Var,
        visual: Var,
        doc: &Prepared,
    ) -> Result<Var> {
        let z = doc.num_segments();
        let t = &self.params.embeddings;
        let lt = embed::embed_layout(tape, store, t, &doc.coarse_boxes[..z])?;
        let lv = embed::embed_layout(tape, store, t, &doc.coarse_boxes[z..])?;
        let a = tape.add(text, lt)?;
        let b = tape.add(visual, lv)?;
        tape.concat_rows(&[a, b])
    }

    pub fn coarse_encode<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        input: Var,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let mut h = input;
        for layer in &self.params.coarse {
            h = transformer_layer(tape, store, layer, h, None, dropout.as_deref_mut())?;
        }
        Ok(h)
    }

    /// All four stages. Rows of the output follow the fine sequence: tokens then patches.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        doc: &Prepared,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Stages> {
        let fine_input = self.fine_input(tape, store, doc)?;
        let fine_output = self.fine_encode(tape, store, fine_input, doc, dropout.as_deref_mut())?;
        let mut stages = Stages {
            fine_input,
            fine_output,
            aggregated_text: None,
            aggregated_visual: None,
            common_sense: None,
            coarse_input: None,
            coarse_output: None,
            output: fine_output,
        };
        if self.config.bypass_aggregation {
            return Ok(stages);
        }
        let (text, visual) = aggregate(tape, fine_output, doc, self.config.aggregation)?;
        stages.aggregated_text = Some(text);
        stages.aggregated_visual = Some(visual);
        let mut text = text;
        if let Some(cs) = self.common_sense_embed(tape, store, &doc.common_sense)? {
            stages.common_sense = Some(cs);
            text = tape.add(text, cs)?;
        }
        let coarse_input = self.coarse_input(tape, store, text, visual, doc)?;
        let coarse_output = self.coarse_encode(tape, store, coarse_input, dropout)?;
        stages.coarse_input = Some(coarse_input);
        stages.coarse_output = Some(coarse_output);
        stages.output = fuse(tape, fine_output, coarse_output, doc)?;
        Ok(stages)
    }

    /// Affine tag scores for the text rows of `h`.
    pub fn head<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, h: Var, doc: &Prepared) -> Result<Var> {
        let text = tape.gather_rows(h, &(0..doc.num_tokens()).collect::<Vec<_>>())?;
        let w = tape.param(store, self.params.head_w);
        let b = tape.param(store, self.params.head_b);
        let y = tape.matmul(text, w)?;
        tape.add_row(y, b)
    }

    pub fn logits<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        doc: &Prepared,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Var, Stages)> {
        let stages = self.forward(tape, store, doc, dropout)?;
        Ok((self.head(tape, store, stages.output, doc)?, stages))
    }

    /// Mean cross-entropy over first sub-tokens of labeled words.
    pub fn loss<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        doc: &Prepared,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let targets = doc
            .targets
            .as_ref()
            .ok_or_else(|| Error::Invalid("document has no labels to train on".into()))?;
        let (logits, _) = self.logits(tape, store, doc, dropout)?;
        tape.cross_entropy(logits, targets)
    }

    /// Highest-scoring tag for every word (read at its first sub-token).
    pub fn predict(&self, store: &ParamStore, doc: &Prepared) -> Result<Vec<String>> {
        let mut tape = Tape::inference();
        let (logits, _) = self.logits(&mut tape, store, doc, None)?;
        let scores = tape.value(logits);
        let mut out = Vec::with_capacity(doc.graph.page().words().len());
        for (i, &first) in doc.tokens.first_of_word.iter().enumerate() {
            if first {
                let row = scores.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                out.push(self.tags.tag(best).to_string());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
