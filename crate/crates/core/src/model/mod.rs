//! The full forecaster: pyramid construction, top-down interaction, per-scale
//! predictors and the fusion layer, plus the ablation variants and checkpoints.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointError, Manifest,
    ManifestParam, FORMAT_VERSION,
};

use crate::interaction::{
    check_global_len, run_interaction, FullConnectParams, InterBlock, InterScaleParams,
    InteractionOutput, InteractionParams, IntraScaleParams, LastNodeParams, RnnKind,
};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::pyramid::{build_pyramid, BranchSet, CsicbParams, Mixing, PyramidConfig};
use crate::tensor::{Axis, Graph, Tensor, Var};
use crate::training::{Forecaster, Trainable};
use crate::{Error, Result};

/// Structural variants used for ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Construction without the convolution branch.
    NoConv,
    /// Construction with the convolution branch only.
    NoPooling,
    /// Pyramid levels go straight to the predictors.
    NoAll,
    NoInterscale,
    NoIntrascale,
    /// Last RNN hidden state replaces the global-information bottleneck.
    Lastnode,
    /// A dense `L_s → L_{s−1}` time map replaces the bottleneck.
    Fullconnect,
    /// Only the finest scale's predictor produces the forecast.
    NoFusion,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoConv,
        Variant::NoPooling,
        Variant::NoAll,
        Variant::NoInterscale,
        Variant::NoIntrascale,
        Variant::Lastnode,
        Variant::Fullconnect,
        Variant::NoFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoConv => "no_conv",
            Variant::NoPooling => "no_pooling",
            Variant::NoAll => "no_all",
            Variant::NoInterscale => "no_interscale",
            Variant::NoIntrascale => "no_intrascale",
            Variant::Lastnode => "lastnode",
            Variant::Fullconnect => "fullconnect",
            Variant::NoFusion => "no_fusion",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of the fusion layer's weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// One scalar per scale.
    #[default]
    PerScale,
    /// One weight per scale and horizon step.
    PerHorizon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InterKind {
    Skip,
    Bottleneck,
    LastNode,
    FullConnect,
}

/// What a variant keeps of the full architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantPlan {
    pub branches: BranchSet,
    pub intra: bool,
    inter: InterKind,
    pub fusion: bool,
}

impl VariantPlan {
    pub fn uses_bottleneck(&self) -> bool {
        self.inter == InterKind::Bottleneck
    }

    pub fn uses_inter(&self) -> bool {
        self.inter != InterKind::Skip
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
    #[serde(default = "defaults::num_scales")]
    pub num_scales: usize,
    #[serde(default = "defaults::global_len")]
    pub global_len: usize,
    /// RNN hidden size; `channels` when unset.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Width of the intra-scale feed-forward layer; `4 · channels` when unset.
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub rnn: RnnKind,
    #[serde(default)]
    pub branches: BranchSet,
    #[serde(default = "defaults::window")]
    pub window: usize,
    #[serde(default = "defaults::window")]
    pub stride: usize,
    #[serde(default)]
    pub mixing: Mixing,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn num_scales() -> usize {
        2
    }
    pub fn global_len() -> usize {
        6
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn window() -> usize {
        2
    }
}

impl ModelConfig {
    pub fn new(input_len: usize, horizon: usize, channels: usize) -> Self {
        Self {
            input_len,
            horizon,
            channels,
            num_scales: defaults::num_scales(),
            global_len: defaults::global_len(),
            hidden: None,
            d_ff: None,
            dropout: defaults::dropout(),
            rnn: RnnKind::Lstm,
            branches: BranchSet::full(),
            window: defaults::window(),
            stride: defaults::window(),
            mixing: Mixing::BranchAxis,
            fusion: Fusion::PerScale,
            variant: Variant::Full,
            seed: 0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or(self.channels)
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.channels)
    }

    pub fn plan(&self) -> VariantPlan {
        let mut plan = VariantPlan {
            branches: self.branches.clone(),
            intra: true,
            inter: InterKind::Bottleneck,
            fusion: true,
        };
        match self.variant {
            Variant::Full => {}
            Variant::NoConv => plan.branches = BranchSet::pooling_only(),
            Variant::NoPooling => plan.branches = BranchSet::conv_only(),
            Variant::NoAll => {
                plan.intra = false;
                plan.inter = InterKind::Skip;
            }
            Variant::NoInterscale => plan.inter = InterKind::Skip,
            Variant::NoIntrascale => plan.intra = false,
            Variant::Lastnode => plan.inter = InterKind::LastNode,
            Variant::Fullconnect => plan.inter = InterKind::FullConnect,
            Variant::NoFusion => plan.fusion = false,
        }
        plan
    }

    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            num_scales: self.num_scales,
            window: self.window,
            stride: self.stride,
            channels: self.channels,
            branches: self.plan().branches,
            mixing: self.mixing,
        }
    }

    pub fn scale_lengths(&self) -> Result<Vec<usize>> {
        self.pyramid().scale_lengths(self.input_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.horizon == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "input_len ({}), horizon ({}) and channels ({}) must be positive",
                self.input_len, self.horizon, self.channels
            )));
        }
        if self.hidden() == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        if self.d_ff() < self.channels {
            return Err(Error::Config(format!(
                "d_ff ({}) must be at least channels ({})",
                self.d_ff(),
                self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        let lengths = self.scale_lengths()?;
        if self.plan().uses_bottleneck() {
            for s in 1..lengths.len() {
                check_global_len(self.global_len, lengths[s], lengths[s - 1]).map_err(
                    |e| match e {
                        Error::Config(msg) => Error::Config(format!("scale {s}: {msg}")),
                        other => other,
                    },
                )?;
            }
        }
        Ok(())
    }

    /// Closed-form scalar parameter count, independent of the layout code.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let plan = self.plan();
        let lengths = self.scale_lengths()?;
        let (d, h, ff, horizon) = (self.channels, self.hidden(), self.d_ff(), self.horizon);
        let c = self.num_scales;

        let mut total = c * self.pyramid().block_param_count();
        if plan.intra {
            total += (c + 1) * IntraScaleParams::param_count(self.rnn, d, h, ff);
        }
        for s in 1..=c {
            let (coarse, fine) = (lengths[s], lengths[s - 1]);
            total += match plan.inter {
                InterKind::Skip => 0,
                InterKind::Bottleneck => {
                    InterScaleParams::param_count(coarse, fine, self.global_len, d)
                }
                InterKind::LastNode => LastNodeParams::param_count(h, fine, d),
                InterKind::FullConnect => FullConnectParams::param_count(coarse, fine),
            };
        }
        if plan.fusion {
            total += lengths.iter().map(|l| l * horizon + horizon).sum::<usize>();
            total += match self.fusion {
                Fusion::PerScale => c + 1,
                Fusion::PerHorizon => (c + 1) * horizon,
            };
        } else {
            total += lengths[0] * horizon + horizon;
        }
        Ok(total)
    }
}

/// Time-axis predictor `L_s → H`, shared across channels.
#[derive(Clone, Debug)]
pub struct PredictorParams {
    /// `L_s × H`
    pub w: ParamId,
    /// `[H]`
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub lengths: Vec<usize>,
    pub csicb: Vec<CsicbParams>,
    pub interaction: InteractionParams,
    /// One per scale, or only scale 0 without fusion.
    pub predictors: Vec<PredictorParams>,
    /// `[C+1]` or `[C+1, H]`; absent without fusion.
    pub fusion: Option<ParamId>,
}

impl ModelLayout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = ParamBuilder::new(store, &mut rng);
        let plan = cfg.plan();
        let pyr = cfg.pyramid();
        let lengths = pyr.scale_lengths(cfg.input_len)?;
        let c = cfg.num_scales;
        let (d, h) = (cfg.channels, cfg.hidden());

        let csicb = (1..=c)
            .map(|s| CsicbParams::init(&mut b, s, &pyr))
            .collect();

        let intra = (0..=c)
            .map(|s| {
                plan.intra.then(|| {
                    IntraScaleParams::init(&mut b, s, cfg.rnn, d, h, cfg.d_ff(), cfg.dropout)
                })
            })
            .collect();
        let mut inter = Vec::with_capacity(c);
        for s in 1..=c {
            let (coarse, fine) = (lengths[s], lengths[s - 1]);
            inter.push(match plan.inter {
                InterKind::Skip => InterBlock::Skip,
                InterKind::Bottleneck => InterBlock::Bottleneck(InterScaleParams::init(
                    &mut b,
                    s,
                    coarse,
                    fine,
                    cfg.global_len,
                    d,
                    cfg.dropout,
                )?),
                InterKind::LastNode => {
                    InterBlock::LastNode(LastNodeParams::init(&mut b, s, h, fine, d, cfg.dropout))
                }
                InterKind::FullConnect => InterBlock::FullConnect(FullConnectParams::init(
                    &mut b,
                    s,
                    coarse,
                    fine,
                    cfg.dropout,
                )),
            });
        }

        let predicted_scales = if plan.fusion { c + 1 } else { 1 };
        let predictors = (0..predicted_scales)
            .map(|s| PredictorParams {
                w: b.uniform(
                    format!("pred.{s}.w"),
                    &[lengths[s], cfg.horizon],
                    lengths[s],
                ),
                b: b.constant(format!("pred.{s}.b"), &[cfg.horizon], 0.0),
            })
            .collect();
        let fusion = plan.fusion.then(|| {
            let shape = match cfg.fusion {
                Fusion::PerScale => vec![c + 1],
                Fusion::PerHorizon => vec![c + 1, cfg.horizon],
            };
            b.constant("fusion.w", &shape, 1.0 / (c + 1) as f64)
        });

        Ok(Self {
            lengths,
            csicb,
            interaction: InteractionParams { intra, inter },
            predictors,
            fusion,
        })
    }
}

/// Every intermediate of one forward pass, for inspection and tests.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub levels: Vec<Var>,
    pub interaction: InteractionOutput,
    /// Per-scale horizon forecasts `Ẑ_p^s` (only scale 0 without fusion).
    pub predictions: Vec<Var>,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: ModelLayout,
    params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = ModelLayout::build(&config, &mut params)?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds the layout for `config` and adopts `params`, which must list the
    /// same names and shapes in the same order.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.params.len() != params.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: "<parameter count>".into(),
                expected: vec![model.params.len()],
                found: vec![params.len()],
            }
            .into());
        }
        for (want, got) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: format!("{} / {}", want.name, got.name),
                    expected: want.value.shape().to_vec(),
                    found: got.value.shape().to_vec(),
                }
                .into());
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, bound, x)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let shape = g.shape(x);
        if shape != [cfg.input_len, cfg.channels] {
            return Err(Error::Tensor(crate::tensor::TensorError::Shape {
                op: "model input",
                lhs: vec![cfg.input_len, cfg.channels],
                rhs: shape.to_vec(),
            }));
        }
        let levels = build_pyramid(g, x, &self.layout.csicb, bound, &cfg.pyramid())?;
        let interaction = run_interaction(g, &levels, &self.layout.interaction, bound)?;
        let mut predictions = Vec::with_capacity(self.layout.predictors.len());
        for (p, &z_hat) in self.layout.predictors.iter().zip(&interaction.z_hats) {
            predictions.push(predict_scale(g, z_hat, bound[p.w], bound[p.b])?);
        }
        let output = match self.layout.fusion {
            Some(w) => fuse(g, &predictions, bound[w])?,
            None => predictions[0],
        };
        Ok(ForwardTrace {
            levels,
            interaction,
            predictions,
            output,
        })
    }

    /// Applies the model to each window with shared parameters.
    pub fn forward_batch(&self, g: &mut Graph, bound: &Bound, xs: &[Var]) -> Result<Vec<Var>> {
        xs.iter().map(|&x| self.forward(g, bound, x)).collect()
    }

    pub fn ensure_channels(&self, channels: usize) -> Result<()> {
        if channels != self.config.channels {
            return Err(CheckpointError::ShapeMismatch {
                name: "channels".into(),
                expected: vec![self.config.channels],
                found: vec![channels],
            }
            .into());
        }
        Ok(())
    }
}

impl Forecaster for Model {
    fn input_len(&self) -> usize {
        self.config.input_len
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        crate::training::forecast_frozen(self, x)
    }
}

impl Trainable for Model {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        Model::forward(self, g, bound, x)
    }
}

/// `Ẑ_p^s`: time-axis affine map `L_s → H` shared across channels.
pub fn predict_scale(g: &mut Graph, z_hat: Var, w: Var, b: Var) -> Result<Var> {
    Ok(g.affine(z_hat, w, Some(b), Axis::Time)?)
}

/// Bias-free weighted sum of per-scale forecasts over the scale axis.
pub fn fuse(g: &mut Graph, per_scale: &[Var], w: Var) -> Result<Var> {
    let expected = g.shape(w)[0];
    if per_scale.len() != expected {
        return Err(Error::Config(format!(
            "fusion has {expected} weights for {} scale forecasts",
            per_scale.len()
        )));
    }
    let stacked = g.stack(per_scale, 0)?;
    Ok(g.weighted_sum(stacked, 0, w, None)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightRow {
    pub scale: usize,
    pub input_position: usize,
    pub horizon_position: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalRow {
    pub scale: usize,
    pub input_position: usize,
    pub mean_abs_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PredictorExport {
    pub weights: Vec<WeightRow>,
    /// Mean `|w|` over the horizon for every input position.
    pub marginal: Vec<MarginalRow>,
}

/// Flattens every per-scale predictor matrix for external plotting.
pub fn export_predictor_weights(model: &Model) -> PredictorExport {
    let mut out = PredictorExport::default();
    for (scale, p) in model.layout.predictors.iter().enumerate() {
        let w = model.params.get(p.w);
        let (rows, cols) = (w.rows(), w.cols());
        for i in 0..rows {
            let mut abs_sum = 0.0;
            for j in 0..cols {
                let weight = w.get2(i, j);
                abs_sum += weight.abs();
                out.weights.push(WeightRow {
                    scale,
                    input_position: i,
                    horizon_position: j,
                    weight,
                });
            }
            out.marginal.push(MarginalRow {
                scale,
                input_position: i,
                mean_abs_weight: abs_sum / cols as f64,
            });
        }
    }
    out
}
