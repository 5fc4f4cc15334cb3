//! Mixed multi-scale construction.
//!
//! Each coarser level is produced from the level below by a coarser-scale
//! information catch block: a depthwise convolution and max/min/average pooling
//! all share one window and stride, their outputs are stacked on a branch axis and
//! a small linear layer mixes the branches back into one `(L' × D)` subsequence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::{Axis, Graph, PoolMode, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Conv,
    Max,
    Min,
    Avg,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Conv, Branch::Max, Branch::Min, Branch::Avg];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Conv => "conv",
            Branch::Max => "max",
            Branch::Min => "min",
            Branch::Avg => "avg",
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Branch::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown branch {s:?}")))
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-empty set of construction branches, kept in canonical order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Branch>", into = "Vec<Branch>")]
pub struct BranchSet(Vec<Branch>);

impl BranchSet {
    pub fn new(branches: impl IntoIterator<Item = Branch>) -> Result<Self> {
        let mut v: Vec<Branch> = branches.into_iter().collect();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Config("branch set must not be empty".into()));
        }
        Ok(Self(v))
    }

    pub fn full() -> Self {
        Self(Branch::ALL.to_vec())
    }

    pub fn pooling_only() -> Self {
        Self(vec![Branch::Max, Branch::Min, Branch::Avg])
    }

    pub fn conv_only() -> Self {
        Self(vec![Branch::Conv])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, b: Branch) -> bool {
        self.0.contains(&b)
    }

    pub fn iter(&self) -> impl Iterator<Item = Branch> + '_ {
        self.0.iter().copied()
    }
}

impl Default for BranchSet {
    fn default() -> Self {
        Self::full()
    }
}

impl TryFrom<Vec<Branch>> for BranchSet {
    type Error = Error;

    fn try_from(v: Vec<Branch>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BranchSet> for Vec<Branch> {
    fn from(b: BranchSet) -> Self {
        b.0
    }
}

/// How the stacked branch outputs are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// One weight per branch plus a scalar bias, shared over time and channels.
    #[default]
    BranchAxis,
    /// A full `(|branches|·D) → D` linear layer over branches and channels.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub num_scales: usize,
    pub window: usize,
    pub stride: usize,
    pub channels: usize,
    pub branches: BranchSet,
    pub mixing: Mixing,
}

impl PyramidConfig {
    pub fn new(num_scales: usize, channels: usize) -> Self {
        Self {
            num_scales,
            window: 2,
            stride: 2,
            channels,
            branches: BranchSet::full(),
            mixing: Mixing::BranchAxis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "pyramid window ({}) and stride ({}) must be positive",
                self.window, self.stride
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("pyramid needs at least one channel".into()));
        }
        Ok(())
    }

    /// Length after right replicate-padding so the last window is complete.
    pub fn padded_len(&self, len: usize) -> usize {
        if len <= self.window {
            return self.window;
        }
        match (len - self.window) % self.stride {
            0 => len,
            r => len + self.stride - r,
        }
    }

    /// Length of the level built from a level of length `len`.
    pub fn next_len(&self, len: usize) -> usize {
        (self.padded_len(len) - self.window) / self.stride + 1
    }

    /// `[L_0, …, L_C]` for an input of length `input_len`.
    pub fn scale_lengths(&self, input_len: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if input_len == 0 {
            return Err(Error::Config("input length must be positive".into()));
        }
        let mut lengths = vec![input_len];
        for scale in 1..=self.num_scales {
            let prev = lengths[scale - 1];
            let next = self.next_len(prev);
            if next < 1 || next >= prev {
                return Err(Error::Config(format!(
                    "pyramid too deep for input length {input_len}: scale {scale} \
                     would have length {next} from {prev}"
                )));
            }
            lengths.push(next);
        }
        Ok(lengths)
    }

    /// Scalar parameter count of one block.
    pub fn block_param_count(&self) -> usize {
        let d = self.channels;
        let b = self.branches.len();
        let conv = if self.branches.contains(Branch::Conv) {
            self.window * d
        } else {
            0
        };
        let mix = match self.mixing {
            Mixing::BranchAxis => b + 1,
            Mixing::Full => b * d * d + d,
        };
        conv + mix
    }
}

/// Parameters of the block that builds scale `s` from scale `s − 1`.
#[derive(Clone, Debug)]
pub struct CsicbParams {
    /// `window × D` depthwise kernels; present iff the conv branch is enabled.
    pub conv_kernels: Option<ParamId>,
    /// `[|branches|]` for branch-axis mixing, `(|branches|·D) × D` for full mixing.
    pub mix_weights: ParamId,
    /// `[1]` for branch-axis mixing, `[D]` for full mixing.
    pub mix_bias: ParamId,
}

impl CsicbParams {
    pub fn init(b: &mut ParamBuilder<'_>, scale: usize, cfg: &PyramidConfig) -> Self {
        let d = cfg.channels;
        let n = cfg.branches.len();
        let conv_kernels = cfg
            .branches
            .contains(Branch::Conv)
            .then(|| b.uniform(format!("csicb.{scale}.conv"), &[cfg.window, d], cfg.window));
        let (mix_weights, mix_bias) = match cfg.mixing {
            Mixing::BranchAxis => (
                b.uniform(format!("csicb.{scale}.mix_w"), &[n], n),
                b.constant(format!("csicb.{scale}.mix_b"), &[1], 0.0),
            ),
            Mixing::Full => (
                b.uniform(format!("csicb.{scale}.mix_w"), &[n * d, d], n * d),
                b.constant(format!("csicb.{scale}.mix_b"), &[d], 0.0),
            ),
        };
        Self {
            conv_kernels,
            mix_weights,
            mix_bias,
        }
    }
}

/// Builds one coarser level from `x` (`L × D`).
pub fn csicb_forward(
    g: &mut Graph,
    x: Var,
    params: &CsicbParams,
    bound: &Bound,
    cfg: &PyramidConfig,
) -> Result<Var> {
    let len = g.shape(x)[0];
    let padded = cfg.padded_len(len);
    let out_len = cfg.next_len(len);
    if out_len < 1 {
        return Err(Error::Config("pyramid too deep for input length".into()));
    }
    let x = if padded > len {
        g.pad_replicate(x, padded - len)?
    } else {
        x
    };

    let mut outputs = Vec::with_capacity(cfg.branches.len());
    for branch in cfg.branches.iter() {
        let y = match branch {
            Branch::Conv => {
                let kernels = params.conv_kernels.ok_or_else(|| {
                    Error::Config("conv branch enabled without conv kernels".into())
                })?;
                g.conv1d(x, bound[kernels], cfg.stride)?
            }
            Branch::Max => g.pool1d(PoolMode::Max, x, cfg.window, cfg.stride)?,
            Branch::Min => g.pool1d(PoolMode::Min, x, cfg.window, cfg.stride)?,
            Branch::Avg => g.pool1d(PoolMode::Avg, x, cfg.window, cfg.stride)?,
        };
        outputs.push(y);
    }

    // (L' × branches × D)
    let stacked = g.stack(&outputs, 1)?;
    let mixed = match cfg.mixing {
        Mixing::BranchAxis => g.weighted_sum(
            stacked,
            1,
            bound[params.mix_weights],
            Some(bound[params.mix_bias]),
        )?,
        Mixing::Full => {
            let d = cfg.channels;
            let flat = g.reshape(stacked, &[out_len, cfg.branches.len() * d])?;
            g.affine(
                flat,
                bound[params.mix_weights],
                Some(bound[params.mix_bias]),
                Axis::Feature,
            )?
        }
    };
    Ok(mixed)
}

/// `[X⁰, …, X^C]`, finest first. `X⁰` is the input itself.
pub fn build_pyramid(
    g: &mut Graph,
    x0: Var,
    blocks: &[CsicbParams],
    bound: &Bound,
    cfg: &PyramidConfig,
) -> Result<Vec<Var>> {
    let shape = g.shape(x0).to_vec();
    if shape.len() != 2 || shape[1] != cfg.channels {
        return Err(Error::Config(format!(
            "pyramid input must be (T × {}), got {shape:?}",
            cfg.channels
        )));
    }
    if blocks.len() != cfg.num_scales {
        return Err(Error::Config(format!(
            "{} construction blocks for {} scales",
            blocks.len(),
            cfg.num_scales
        )));
    }
    cfg.scale_lengths(shape[0])?;
    let mut levels = vec![x0];
    for (i, block) in blocks.iter().enumerate() {
        let prev = levels[i];
        let next = csicb_forward(g, prev, block, bound, cfg).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("scale {}: {msg}", i + 1)),
            other => other,
        })?;
        levels.push(next);
    }
    Ok(levels)
}
