//! The toy vision-language model: frozen feature stub, two-layer projector,
//! token and position embeddings, pre-norm attention blocks whose
//! feed-forward sublayer is either dense or a routed expert ensemble, and
//! an untied output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{LayerTrace, RoutingTrace};
use crate::autodiff::{Tape, Var};
use crate::batch::{Modality, TokenBatch};
use crate::error::{Error, Result};
use crate::moe::{self, normal_matrix, ExpertEnsemble, FfnParams, RouterInit};
use crate::objectives::LoadCounting;
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::router::{CapacityReport, RoutingConfig, RoutingDecision};
use crate::tensor::Tensor;

/// Which blocks carry an expert ensemble instead of a dense FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Every second block, starting from block 1.
    Interval,
    FirstHalf,
    SecondHalf,
    All,
    Dense,
}

impl Placement {
    pub const SPARSE: [Placement; 4] = [
        Placement::FirstHalf,
        Placement::SecondHalf,
        Placement::Interval,
        Placement::All,
    ];

    pub fn is_moe_block(self, block: usize, layers: usize) -> bool {
        match self {
            Placement::Interval => block % 2 == 1,
            Placement::FirstHalf => block < layers / 2,
            Placement::SecondHalf => block >= layers / 2,
            Placement::All => true,
            Placement::Dense => false,
        }
    }

    pub fn moe_blocks(self, layers: usize) -> Vec<usize> {
        (0..layers).filter(|&b| self.is_moe_block(b, layers)).collect()
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "interval" => Ok(Placement::Interval),
            "first_half" => Ok(Placement::FirstHalf),
            "second_half" => Ok(Placement::SecondHalf),
            "all" => Ok(Placement::All),
            "dense" => Ok(Placement::Dense),
            other => Err(Error::Config(format!("unknown placement '{other}'"))),
        }
    }
}

fn default_image_feature_dim() -> usize {
    16
}
fn default_encoder_dim() -> usize {
    32
}
fn default_max_seq_len() -> usize {
    64
}
fn default_capacity() -> f64 {
    1.5
}
fn default_alpha() -> f64 {
    0.01
}
fn default_pseudo_image_tokens() -> usize {
    16
}

/// Architecture hyperparameters. The first block of fields mirrors the
/// columns of a published model table; the rest only matter for the toy
/// model that actually gets built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Vocabulary size.
    pub embedding_size: usize,
    pub width: usize,
    pub layers: usize,
    pub ffn_size: usize,
    pub ffn_factor: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Optional explicit MoE layer count; must agree with `placement`.
    #[serde(default)]
    pub moe_layers: Option<usize>,
    pub placement: Placement,
    #[serde(default = "default_capacity")]
    pub capacity_factor: f64,
    #[serde(default = "default_pseudo_image_tokens")]
    pub pseudo_image_tokens: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_image_feature_dim")]
    pub image_feature_dim: usize,
    #[serde(default = "default_encoder_dim")]
    pub encoder_dim: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub router_init: RouterInit,
    #[serde(default)]
    pub renormalize_gates: bool,
    #[serde(default)]
    pub load_counting: LoadCounting,
}

impl Default for ModelConfig {
    /// Toy defaults: sized so a full gradient check runs in seconds.
    fn default() -> Self {
        Self {
            name: Some("toy".into()),
            embedding_size: 256,
            width: 64,
            layers: 4,
            ffn_size: 128,
            ffn_factor: 2,
            heads: 4,
            experts: 4,
            top_k: 2,
            moe_layers: None,
            placement: Placement::Interval,
            capacity_factor: default_capacity(),
            pseudo_image_tokens: default_pseudo_image_tokens(),
            alpha: default_alpha(),
            image_feature_dim: default_image_feature_dim(),
            encoder_dim: default_encoder_dim(),
            max_seq_len: default_max_seq_len(),
            router_init: RouterInit::Zeros,
            renormalize_gates: false,
            load_counting: LoadCounting::Top1,
        }
    }
}

/// Activated and total parameter counts of the language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub activated: u64,
    pub total: u64,
}

impl ModelConfig {
    pub fn moe_layer_count(&self) -> usize {
        self.placement.moe_blocks(self.layers).len()
    }

    pub fn routing(&self) -> RoutingConfig {
        RoutingConfig {
            num_experts: self.experts,
            top_k: self.top_k,
            capacity_factor: self.capacity_factor,
            renormalize: self.renormalize_gates,
        }
    }

    /// Checks the fields used by the parameter formula.
    pub fn validate_shape(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.embedding_size == 0 || self.width == 0 || self.layers == 0 || self.ffn_size == 0 {
            return err("embedding_size, width, layers and ffn_size must be positive".into());
        }
        if self.ffn_factor == 0 {
            return err("ffn_factor must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return err(format!("heads ({}) must divide width ({})", self.heads, self.width));
        }
        self.routing().validate()?;
        let derived = self.moe_layer_count();
        if let Some(m) = self.moe_layers {
            if m != derived {
                return err(format!(
                    "moe_layers = {m} disagrees with placement {:?} over {} layers ({derived})",
                    self.placement, self.layers
                ));
            }
        }
        if self.placement == Placement::Dense
            && (self.experts != 1 || self.top_k != 1)
            && self.moe_layers.unwrap_or(0) != 0
        {
            return err("dense placement cannot have MoE layers".into());
        }
        Ok(())
    }

    /// Parses a bare model config; only the shape fields are validated.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate_shape()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Full validation for configs that are going to be built.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if !(2..=3).contains(&self.ffn_factor) {
            return Err(Error::Config(format!(
                "ffn_factor must be 2 or 3, got {}",
                self.ffn_factor
            )));
        }
        if self.width < 2 {
            return Err(Error::Config("width must be at least 2".into()));
        }
        if self.image_feature_dim == 0 || self.encoder_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "image_feature_dim, encoder_dim and max_seq_len must be positive".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Closed-form parameter count of the language model:
///
/// ```text
/// V·W + L·(4W² + W·F·f + 2W) + W + W·V
///     + M·(X−1)·(W·F·f + 2W) + M·W·X
/// ```
///
/// with `X = experts` for the total and `X = top_k` for the activated count.
pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let v = config.embedding_size as u64;
    let w = config.width as u64;
    let l = config.layers as u64;
    let ffn = config.ffn_size as u64 * config.ffn_factor as u64;
    let m = config.moe_layer_count() as u64;
    let with_experts = |x: u64| {
        v * w + l * (4 * w * w + w * ffn + 2 * w) + w + w * v + m * x.saturating_sub(1) * (w * ffn + 2 * w) + m * w * x
    };
    if m == 0 {
        let dense = with_experts(0);
        return ParamCount {
            activated: dense,
            total: dense,
        };
    }
    ParamCount {
        activated: with_experts(config.top_k as u64),
        total: with_experts(config.experts as u64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeedForward {
    Dense(FfnParams),
    Sparse(ExpertEnsemble),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attn: Attention,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Image features and text token ids for `batch` sequences of identical
/// layout: `image_tokens` pseudo-image positions followed by `text_len`
/// text positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `(batch·image_tokens) × image_feature_dim`.
    pub images: Tensor,
    /// `batch·text_len` token ids.
    pub text: Vec<usize>,
    pub batch: usize,
    pub image_tokens: usize,
    pub text_len: usize,
}

impl ModelInput {
    pub fn seq_len(&self) -> usize {
        self.image_tokens + self.text_len
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len()
    }

    pub fn modality(&self) -> Vec<Modality> {
        let t = self.seq_len();
        (0..self.rows())
            .map(|r| {
                if r % t < self.image_tokens {
                    Modality::Image
                } else {
                    Modality::Text
                }
            })
            .collect()
    }

    pub fn positions(&self) -> Vec<usize> {
        let t = self.seq_len();
        (0..self.rows()).map(|r| r % t).collect()
    }

    /// Target ids per flattened position; image positions get 0.
    pub fn targets(&self) -> Vec<usize> {
        let t = self.seq_len();
        (0..self.rows())
            .map(|r| {
                let (b, p) = (r / t, r % t);
                if p < self.image_tokens {
                    0
                } else {
                    self.text[b * self.text_len + p - self.image_tokens]
                }
            })
            .collect()
    }
}

/// Routing outputs of one MoE block during a forward pass.
#[derive(Debug)]
pub struct MoeLayerPass {
    pub block: usize,
    pub probs: Var,
    pub decisions: Vec<RoutingDecision>,
    pub capacity: CapacityReport,
    pub expert_macs: u64,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub moe: Vec<MoeLayerPass>,
}

impl ForwardPass {
    pub fn expert_macs(&self) -> u64 {
        self.moe.iter().map(|m| m.expert_macs).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: ParamId,
    pub projector: Projector,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_gain: ParamId,
    pub head: ParamId,
}

// Stream ids keep the base weights independent of anything expert-related.
const BASE_STREAM: u64 = 0;
const EXPERT_STREAM: u64 = 1;
const ROUTER_STREAM: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ToyModel {
    /// Builds the model with expert ensembles where `placement` selects.
    /// Experts are drawn independently; routers follow `router_init`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_inner(config, seed, true)
    }

    /// Builds the dense parent: every block gets a plain FFN regardless of
    /// placement. Non-FFN weights match [`ToyModel::build`] bitwise.
    pub fn build_dense(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_inner(config, seed, false)
    }

    fn build_inner(config: &ModelConfig, seed: u64, sparse: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, BASE_STREAM);
        let mut expert_rng = stream_rng(seed, EXPERT_STREAM);
        let mut router_rng = stream_rng(seed, ROUTER_STREAM);
        let (d, v) = (config.width, config.embedding_size);
        let mut store = ParamStore::new();

        let c_in = config.image_feature_dim;
        let c_enc = config.encoder_dim;
        let encoder = store.push(
            "encoder.proj",
            ParamGroup::Encoder,
            normal_matrix(&mut rng, c_in, c_enc, 1.0 / (c_in as f64).sqrt()),
        );
        let projector = Projector {
            w1: store.push(
                "projector.w1",
                ParamGroup::Projector,
                normal_matrix(&mut rng, c_enc, d, 1.0 / (c_enc as f64).sqrt()),
            ),
            b1: store.push("projector.b1", ParamGroup::Projector, Tensor::zeros(&[d])),
            w2: store.push(
                "projector.w2",
                ParamGroup::Projector,
                normal_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt()),
            ),
            b2: store.push("projector.b2", ParamGroup::Projector, Tensor::zeros(&[d])),
        };
        let tok_embed = store.push(
            "embed.tokens",
            ParamGroup::TokenEmbedding,
            normal_matrix(&mut rng, v, d, 1.0),
        );
        let pos_embed = store.push(
            "embed.positions",
            ParamGroup::Position,
            normal_matrix(&mut rng, config.max_seq_len, d, 0.1),
        );
        let wstd = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.layers);
        for b in 0..config.layers {
            let mut attn_param = |name: &str| {
                store.push(
                    format!("blocks.{b}.attn.{name}"),
                    ParamGroup::Attention,
                    normal_matrix(&mut rng, d, d, wstd),
                )
            };
            let attn = Attention {
                q: attn_param("q"),
                k: attn_param("k"),
                v: attn_param("v"),
                o: attn_param("o"),
            };
            let moe_here = sparse && config.placement.is_moe_block(b, config.layers);
            let ffn = if moe_here {
                // draw the parent unit so the base stream stays aligned
                let mut scratch = ParamStore::new();
                FfnParams::init(
                    &mut scratch,
                    "scratch",
                    ParamGroup::Ffn,
                    d,
                    config.ffn_size,
                    config.ffn_factor,
                    &mut rng,
                )?;
                let experts = (0..config.experts)
                    .map(|e| {
                        FfnParams::init(
                            &mut store,
                            &format!("blocks.{b}.moe.experts.{e}"),
                            ParamGroup::Expert,
                            d,
                            config.ffn_size,
                            config.ffn_factor,
                            &mut expert_rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let weight = match config.router_init {
                    RouterInit::Zeros => Tensor::zeros(&[d, config.experts]),
                    RouterInit::Normal { std } => normal_matrix(&mut router_rng, d, config.experts, std),
                };
                let weight = store.push(format!("blocks.{b}.moe.router"), ParamGroup::Router, weight);
                FeedForward::Sparse(ExpertEnsemble {
                    experts,
                    router: crate::router::RouterState {
                        weight,
                        config: config.routing(),
                    },
                })
            } else {
                FeedForward::Dense(FfnParams::init(
                    &mut store,
                    &format!("blocks.{b}.ffn"),
                    ParamGroup::Ffn,
                    d,
                    config.ffn_size,
                    config.ffn_factor,
                    &mut rng,
                )?)
            };
            blocks.push(Block { attn, ffn });
        }
        let final_gain = store.push("final_norm.gain", ParamGroup::FinalNorm, Tensor::filled(&[d], 1.0));
        let head = store.push("head", ParamGroup::Head, normal_matrix(&mut rng, d, v, wstd));
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            projector,
            tok_embed,
            pos_embed,
            blocks,
            final_gain,
            head,
        })
    }

    pub fn is_sparse(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b.ffn, FeedForward::Sparse(_)))
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b.ffn, FeedForward::Sparse(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Replaces every placement-selected dense FFN with an ensemble of
    /// `routing.num_experts` bitwise copies of it. All other buffers are
    /// copied verbatim, in the same order [`ToyModel::build`] uses.
    pub fn expand_to_moe(&self, routing: RoutingConfig, router_init: RouterInit, seed: u64) -> Result<Self> {
        routing.validate()?;
        if self.is_sparse() {
            return Err(Error::Config("model is already sparse".into()));
        }
        if self.config.placement == Placement::Dense {
            return Err(Error::Config("placement 'dense' selects no MoE layers".into()));
        }
        let mut config = self.config.clone();
        config.experts = routing.num_experts;
        config.top_k = routing.top_k;
        config.capacity_factor = routing.capacity_factor;
        config.renormalize_gates = routing.renormalize;
        config.router_init = router_init;
        config.validate()?;

        let mut router_rng = stream_rng(seed, ROUTER_STREAM);
        let mut store = ParamStore::new();
        let copy = |store: &mut ParamStore, id: ParamId| {
            let e = self.store.entry(id);
            store.push(e.name.clone(), e.group, e.tensor.clone())
        };
        let encoder = copy(&mut store, self.encoder);
        let projector = Projector {
            w1: copy(&mut store, self.projector.w1),
            b1: copy(&mut store, self.projector.b1),
            w2: copy(&mut store, self.projector.w2),
            b2: copy(&mut store, self.projector.b2),
        };
        let tok_embed = copy(&mut store, self.tok_embed);
        let pos_embed = copy(&mut store, self.pos_embed);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let attn = Attention {
                q: copy(&mut store, block.attn.q),
                k: copy(&mut store, block.attn.k),
                v: copy(&mut store, block.attn.v),
                o: copy(&mut store, block.attn.o),
            };
            let FeedForward::Dense(parent) = &block.ffn else {
                unreachable!("checked dense above")
            };
            let ffn = if config.placement.is_moe_block(b, config.layers) {
                let ens = moe::init_from_ffn_into(
                    &self.store,
                    &mut store,
                    &format!("blocks.{b}.moe"),
                    parent,
                    routing,
                    router_init,
                    &mut router_rng,
                )?;
                FeedForward::Sparse(ens)
            } else {
                FeedForward::Dense(parent.replicate_into(
                    &self.store,
                    &mut store,
                    &format!("blocks.{b}.ffn"),
                    ParamGroup::Ffn,
                ))
            };
            blocks.push(Block { attn, ffn });
        }
        let final_gain = copy(&mut store, self.final_gain);
        let head = copy(&mut store, self.head);
        Ok(Self {
            config,
            store,
            encoder,
            projector,
            tok_embed,
            pos_embed,
            blocks,
            final_gain,
            head,
        })
    }

    /// Parameter counts obtained by walking the language-model buffers.
    /// Activated counts only the first `top_k` experts and router columns
    /// of every ensemble.
    pub fn lm_parameter_count(&self) -> ParamCount {
        let total = self.store.count_where(|e| e.group.in_language_model());
        let mut inactive = 0u64;
        for block in &self.blocks {
            if let FeedForward::Sparse(ens) = &block.ffn {
                let cfg = ens.router.config;
                for expert in &ens.experts[cfg.top_k..] {
                    inactive += expert
                        .ids()
                        .iter()
                        .map(|&id| self.store.get(id).len() as u64)
                        .sum::<u64>();
                }
                let router_len = self.store.get(ens.router.weight).len() as u64;
                inactive += router_len / cfg.num_experts as u64 * (cfg.num_experts - cfg.top_k) as u64;
            }
        }
        ParamCount {
            activated: total - inactive,
            total,
        }
    }

    /// Records the computation for `input` on `tape`. MoE routing is
    /// appended to `trace` when given.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bind: &mut Bindings,
        input: &ModelInput,
        mut trace: Option<&mut RoutingTrace>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let t_len = input.seq_len();
        if t_len == 0 || input.batch == 0 {
            return Err(Error::invalid("forward", "sequence length 0"));
        }
        if t_len > cfg.max_seq_len {
            return Err(Error::invalid(
                "forward",
                format!("sequence length {t_len} exceeds {}", cfg.max_seq_len),
            ));
        }
        if input.text.len() != input.batch * input.text_len {
            return Err(Error::shape(
                "forward",
                &[input.text.len()],
                &[input.batch * input.text_len],
            ));
        }
        if let Some(&bad) = input.text.iter().find(|&&t| t >= cfg.embedding_size) {
            return Err(Error::invalid("forward", format!("token id {bad} outside vocabulary")));
        }
        let store = &self.store;
        let d = cfg.width;
        let mut parts = Vec::new();
        if input.image_tokens > 0 {
            let expect = [input.batch * input.image_tokens, cfg.image_feature_dim];
            if input.images.shape() != expect {
                return Err(Error::shape("forward", input.images.shape(), &expect));
            }
            let img = tape.constant(input.images.clone())?;
            let enc = bind.var(tape, store, self.encoder)?;
            let feats = tape.matmul(img, enc)?;
            let w1 = bind.var(tape, store, self.projector.w1)?;
            let b1 = bind.var(tape, store, self.projector.b1)?;
            let w2 = bind.var(tape, store, self.projector.w2)?;
            let b2 = bind.var(tape, store, self.projector.b2)?;
            let h = tape.matmul(feats, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, w2)?;
            parts.push(tape.add_row(h, b2)?);
        }
        if input.text_len > 0 {
            let table = bind.var(tape, store, self.tok_embed)?;
            parts.push(tape.gather_rows(table, &input.text)?);
        }
        let stacked = tape.concat_rows(&parts)?;
        let image_rows = input.batch * input.image_tokens;
        let order: Vec<usize> = (0..input.rows())
            .map(|r| {
                let (b, p) = (r / t_len, r % t_len);
                if p < input.image_tokens {
                    b * input.image_tokens + p
                } else {
                    image_rows + b * input.text_len + (p - input.image_tokens)
                }
            })
            .collect();
        let x0 = tape.gather_rows(stacked, &order)?;
        let pos_table = bind.var(tape, store, self.pos_embed)?;
        let pos = tape.gather_rows(pos_table, &input.positions())?;
        let mut x = tape.add(x0, pos)?;

        let tags = (trace.is_some()).then(|| TokenBatch {
            hidden: Tensor::zeros(&[0, d]),
            modality: input.modality(),
            positions: input.positions(),
        });
        let mut moe = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let n = tape.normalize(x)?;
            let wq = bind.var(tape, store, block.attn.q)?;
            let wk = bind.var(tape, store, block.attn.k)?;
            let wv = bind.var(tape, store, block.attn.v)?;
            let wo = bind.var(tape, store, block.attn.o)?;
            let q = tape.matmul(n, wq)?;
            let k = tape.matmul(n, wk)?;
            let v = tape.matmul(n, wv)?;
            let a = tape.causal_attention(q, k, v, t_len, cfg.heads)?;
            let a = tape.matmul(a, wo)?;
            x = tape.add(x, a)?;
            match &block.ffn {
                FeedForward::Dense(ffn) => {
                    let f = ffn.forward(tape, bind, store, x)?;
                    x = tape.add(x, f)?;
                }
                FeedForward::Sparse(ens) => {
                    let out = ens.forward_on(tape, bind, store, x)?;
                    x = tape.add(x, out.output)?;
                    if let (Some(sink), Some(tags)) = (trace.as_deref_mut(), tags.as_ref()) {
                        let mut layer = LayerTrace::new(b, ens.num_experts());
                        moe::record_layer(&mut layer, &out.decisions, tags, 0);
                        match sink.layers.iter_mut().find(|l| l.block == b) {
                            Some(existing) => existing.tokens.extend(layer.tokens),
                            None => sink.layers.push(layer),
                        }
                    }
                    moe.push(MoeLayerPass {
                        block: b,
                        probs: out.probs,
                        decisions: out.decisions,
                        capacity: out.capacity,
                        expert_macs: out.expert_macs,
                    });
                }
            }
        }
        let n = tape.normalize(x)?;
        let g = bind.var(tape, store, self.final_gain)?;
        let y = tape.affine(n, Some(g), None)?;
        let head = bind.var(tape, store, self.head)?;
        let logits = tape.matmul(y, head)?;
        Ok(ForwardPass { logits, moe })
    }

    /// Inference-only logits, `(batch·seq_len) × vocab`.
    pub fn logits(&self, input: &ModelInput, trace: Option<&mut RoutingTrace>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = Bindings::frozen();
        let pass = self.forward_on(&mut tape, &mut bind, input, trace)?;
        Ok(tape.value(pass.logits).clone())
    }
}
