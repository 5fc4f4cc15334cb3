//! Multi-scale information interaction.
//!
//! The intra-scale block runs a recurrent network over one subsequence, projects
//! the hidden states up to `d_ff` and back to `D`, and gates the result with
//! `sigmoid` of its own input. The inter-scale block compresses a scale to `L_G`
//! global positions, mixes channels, expands to the length of the next finer
//! scale and adds the result to that scale's pyramid level.
//!
//! [`run_interaction`] alternates the two blocks from the coarsest scale down.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::{Axis, Graph, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RnnKind {
    Vanilla,
    #[default]
    Lstm,
    Gru,
}

impl RnnKind {
    /// Number of stacked gate blocks in the weight matrices.
    pub fn gates(self) -> usize {
        match self {
            RnnKind::Vanilla => 1,
            RnnKind::Lstm => 4,
            RnnKind::Gru => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RnnKind::Vanilla => "vanilla",
            RnnKind::Lstm => "lstm",
            RnnKind::Gru => "gru",
        }
    }

    /// Scalar parameter count of one recurrent layer.
    pub fn param_count(self, input: usize, hidden: usize) -> usize {
        let gh = self.gates() * hidden;
        let hidden_bias = if self == RnnKind::Gru { gh } else { 0 };
        input * gh + hidden * gh + gh + hidden_bias
    }
}

impl FromStr for RnnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "rnn" => Ok(RnnKind::Vanilla),
            "lstm" => Ok(RnnKind::Lstm),
            "gru" => Ok(RnnKind::Gru),
            other => Err(Error::Config(format!("unknown rnn kind {other:?}"))),
        }
    }
}

impl fmt::Display for RnnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Weights of a single-layer recurrent network.
///
/// Gate blocks are laid out along the columns: LSTM `[input, forget, cell, output]`,
/// GRU `[reset, update, new]`.
#[derive(Clone, Debug)]
pub struct RnnParams {
    pub kind: RnnKind,
    pub hidden: usize,
    /// `D × gates·h`
    pub w_ih: ParamId,
    /// `h × gates·h`
    pub w_hh: ParamId,
    /// `[gates·h]`, added to the input projection.
    pub b_ih: ParamId,
    /// `[3h]`, GRU only: the hidden-side bias sits inside the reset gate product.
    pub b_hh: Option<ParamId>,
}

impl RnnParams {
    pub fn init(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        kind: RnnKind,
        input: usize,
        hidden: usize,
    ) -> Self {
        let gh = kind.gates() * hidden;
        let w_ih = b.uniform(format!("{prefix}.w_ih"), &[input, gh], input);
        let w_hh = b.uniform(format!("{prefix}.w_hh"), &[hidden, gh], hidden);
        let b_ih = match kind {
            RnnKind::Lstm => {
                let mut bias = vec![0.0; gh];
                bias[hidden..2 * hidden].fill(1.0);
                b.tensor(
                    format!("{prefix}.b_ih"),
                    crate::tensor::Tensor::vector(bias),
                )
            }
            _ => b.constant(format!("{prefix}.b_ih"), &[gh], 0.0),
        };
        let b_hh = (kind == RnnKind::Gru).then(|| b.constant(format!("{prefix}.b_hh"), &[gh], 0.0));
        Self {
            kind,
            hidden,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        }
    }
}

/// Full hidden sequence `(L × h)` from zero initial state.
pub fn rnn_forward(g: &mut Graph, x: Var, p: &RnnParams, bound: &Bound) -> Result<Var> {
    let len = g.shape(x)[0];
    let h = p.hidden;
    // Input projections for every step at once: (L × gates·h).
    let pre = g.affine(x, bound[p.w_ih], Some(bound[p.b_ih]), Axis::Feature)?;
    let w_hh = bound[p.w_hh];
    let mut hidden: Vec<Var> = Vec::with_capacity(len);

    match p.kind {
        RnnKind::Vanilla => {
            let mut state: Option<Var> = None;
            for t in 0..len {
                let mut a = g.narrow(pre, 0, t, 1)?;
                if let Some(prev) = state {
                    let rec = g.matmul(prev, w_hh)?;
                    a = g.add(a, rec)?;
                }
                let ht = g.tanh(a);
                hidden.push(ht);
                state = Some(ht);
            }
        }
        RnnKind::Lstm => {
            let mut state: Option<(Var, Var)> = None;
            for t in 0..len {
                let mut a = g.narrow(pre, 0, t, 1)?;
                if let Some((prev_h, _)) = state {
                    let rec = g.matmul(prev_h, w_hh)?;
                    a = g.add(a, rec)?;
                }
                let s = g.sigmoid(a);
                let i = g.narrow(s, 1, 0, h)?;
                let o = g.narrow(s, 1, 3 * h, h)?;
                let cand_pre = g.narrow(a, 1, 2 * h, h)?;
                let cand = g.tanh(cand_pre);
                let mut c = g.mul(i, cand)?;
                if let Some((_, prev_c)) = state {
                    let f = g.narrow(s, 1, h, h)?;
                    let kept = g.mul(f, prev_c)?;
                    c = g.add(kept, c)?;
                }
                let tc = g.tanh(c);
                let ht = g.mul(o, tc)?;
                hidden.push(ht);
                state = Some((ht, c));
            }
        }
        RnnKind::Gru => {
            let b_hh = p
                .b_hh
                .ok_or_else(|| Error::Config("gru layer without hidden bias".into()))?;
            let mut prev = g.constant(crate::tensor::Tensor::zeros(&[1, h]));
            for t in 0..len {
                let xi = g.narrow(pre, 0, t, 1)?;
                let hh = g.affine(prev, w_hh, Some(bound[b_hh]), Axis::Feature)?;
                let xrz = g.narrow(xi, 1, 0, 2 * h)?;
                let hrz = g.narrow(hh, 1, 0, 2 * h)?;
                let rz_pre = g.add(xrz, hrz)?;
                let rz = g.sigmoid(rz_pre);
                let r = g.narrow(rz, 1, 0, h)?;
                let z = g.narrow(rz, 1, h, h)?;
                let xn = g.narrow(xi, 1, 2 * h, h)?;
                let hn = g.narrow(hh, 1, 2 * h, h)?;
                let rhn = g.mul(r, hn)?;
                let n_pre = g.add(xn, rhn)?;
                let n = g.tanh(n_pre);
                // h' = n + z ∘ (h − n)
                let diff = g.sub(prev, n)?;
                let zd = g.mul(z, diff)?;
                let ht = g.add(n, zd)?;
                hidden.push(ht);
                prev = ht;
            }
        }
    }
    Ok(g.concat(&hidden, 0)?)
}

#[derive(Clone, Debug)]
pub struct IntraScaleParams {
    pub rnn: RnnParams,
    /// `h × d_ff`
    pub w_ita1: ParamId,
    pub b_ita1: ParamId,
    /// `d_ff × D`
    pub w_ita2: ParamId,
    pub b_ita2: ParamId,
    pub dropout: f64,
}

impl IntraScaleParams {
    pub fn init(
        b: &mut ParamBuilder<'_>,
        scale: usize,
        kind: RnnKind,
        channels: usize,
        hidden: usize,
        d_ff: usize,
        dropout: f64,
    ) -> Self {
        let prefix = format!("intra.{scale}");
        let rnn = RnnParams::init(b, &format!("{prefix}.rnn"), kind, channels, hidden);
        Self {
            rnn,
            w_ita1: b.uniform(format!("{prefix}.ita1.w"), &[hidden, d_ff], hidden),
            b_ita1: b.constant(format!("{prefix}.ita1.b"), &[d_ff], 0.0),
            w_ita2: b.uniform(format!("{prefix}.ita2.w"), &[d_ff, channels], d_ff),
            b_ita2: b.constant(format!("{prefix}.ita2.b"), &[channels], 0.0),
            dropout,
        }
    }

    pub fn param_count(kind: RnnKind, channels: usize, hidden: usize, d_ff: usize) -> usize {
        kind.param_count(channels, hidden) + hidden * d_ff + d_ff + d_ff * channels + channels
    }
}

/// Intermediate values of one intra-scale block.
#[derive(Clone, Copy, Debug)]
pub struct IntraOutput {
    /// RNN hidden sequence `H^s` (`L × h`).
    pub hidden: Var,
    /// Ungated block output `Z^s` (`L × D`).
    pub ungated: Var,
    /// `sigmoid(X̂^s) ∘ Z^s`.
    pub gated: Var,
}

pub fn intra_scale_forward(
    g: &mut Graph,
    x_hat: Var,
    p: &IntraScaleParams,
    bound: &Bound,
) -> Result<IntraOutput> {
    let hidden = rnn_forward(g, x_hat, &p.rnn, bound)?;
    let up = g.affine(
        hidden,
        bound[p.w_ita1],
        Some(bound[p.b_ita1]),
        Axis::Feature,
    )?;
    let up = g.dropout(up, p.dropout)?;
    let ungated = g.affine(up, bound[p.w_ita2], Some(bound[p.b_ita2]), Axis::Feature)?;
    let gate = g.sigmoid(x_hat);
    let gated = g.mul(gate, ungated)?;
    Ok(IntraOutput {
        hidden,
        ungated,
        gated,
    })
}

/// Bottleneck from scale `s` (length `L_s`) into scale `s − 1` (length `L_{s−1}`).
#[derive(Clone, Debug)]
pub struct InterScaleParams {
    /// `L_s × L_G`, time axis, no bias.
    pub w_ite1: ParamId,
    /// `D × D`, feature axis.
    pub w_ite2: ParamId,
    pub b_ite2: ParamId,
    /// `L_G × L_{s−1}`, time axis, no bias.
    pub w_ite3: ParamId,
    pub global_len: usize,
    pub dropout: f64,
}

impl InterScaleParams {
    pub fn init(
        b: &mut ParamBuilder<'_>,
        scale: usize,
        coarse_len: usize,
        fine_len: usize,
        global_len: usize,
        channels: usize,
        dropout: f64,
    ) -> Result<Self> {
        check_global_len(global_len, coarse_len, fine_len)?;
        let prefix = format!("inter.{scale}");
        Ok(Self {
            w_ite1: b.uniform(
                format!("{prefix}.ite1.w"),
                &[coarse_len, global_len],
                coarse_len,
            ),
            w_ite2: b.uniform(format!("{prefix}.ite2.w"), &[channels, channels], channels),
            b_ite2: b.constant(format!("{prefix}.ite2.b"), &[channels], 0.0),
            w_ite3: b.uniform(
                format!("{prefix}.ite3.w"),
                &[global_len, fine_len],
                global_len,
            ),
            global_len,
            dropout,
        })
    }

    pub fn param_count(
        coarse_len: usize,
        fine_len: usize,
        global_len: usize,
        channels: usize,
    ) -> usize {
        global_len * (coarse_len + fine_len) + channels * channels + channels
    }
}

/// The global-information length must be shorter than both scales it bridges.
pub fn check_global_len(global_len: usize, coarse_len: usize, fine_len: usize) -> Result<()> {
    if global_len == 0 || global_len >= coarse_len.min(fine_len) {
        return Err(Error::Config(format!(
            "global length {global_len} must be in [1, min({coarse_len}, {fine_len}))"
        )));
    }
    Ok(())
}

/// `X̂^{s−1} = dropout(H_G^s) + X^{s−1}`.
pub fn inter_scale_forward(
    g: &mut Graph,
    z_hat: Var,
    x_finer: Var,
    p: &InterScaleParams,
    bound: &Bound,
) -> Result<Var> {
    check_global_len(p.global_len, g.shape(z_hat)[0], g.shape(x_finer)[0])?;
    let global = g.affine(z_hat, bound[p.w_ite1], None, Axis::Time)?;
    let mixed = g.affine(
        global,
        bound[p.w_ite2],
        Some(bound[p.b_ite2]),
        Axis::Feature,
    )?;
    let influence = g.affine(mixed, bound[p.w_ite3], None, Axis::Time)?;
    let influence = g.dropout(influence, p.dropout)?;
    Ok(g.add(influence, x_finer)?)
}

/// Replacement for the bottleneck that uses the last RNN hidden state as the
/// global information.
#[derive(Clone, Debug)]
pub struct LastNodeParams {
    /// `h × D`
    pub w_proj: ParamId,
    pub b_proj: ParamId,
    /// `1 × L_{s−1}`, spreads the single node over the finer scale's positions.
    pub w_spread: ParamId,
    pub dropout: f64,
}

impl LastNodeParams {
    pub fn init(
        b: &mut ParamBuilder<'_>,
        scale: usize,
        hidden: usize,
        fine_len: usize,
        channels: usize,
        dropout: f64,
    ) -> Self {
        let prefix = format!("inter.{scale}.last");
        Self {
            w_proj: b.uniform(format!("{prefix}.proj.w"), &[hidden, channels], hidden),
            b_proj: b.constant(format!("{prefix}.proj.b"), &[channels], 0.0),
            w_spread: b.uniform(format!("{prefix}.spread.w"), &[1, fine_len], 1),
            dropout,
        }
    }

    pub fn param_count(hidden: usize, fine_len: usize, channels: usize) -> usize {
        hidden * channels + channels + fine_len
    }
}

pub fn last_node_forward(
    g: &mut Graph,
    hidden: Var,
    x_finer: Var,
    p: &LastNodeParams,
    bound: &Bound,
) -> Result<Var> {
    let len = g.shape(hidden)[0];
    let last = g.narrow(hidden, 0, len - 1, 1)?;
    let node = g.affine(last, bound[p.w_proj], Some(bound[p.b_proj]), Axis::Feature)?;
    let spread = g.affine(node, bound[p.w_spread], None, Axis::Time)?;
    let spread = g.dropout(spread, p.dropout)?;
    Ok(g.add(spread, x_finer)?)
}

/// Replacement for the bottleneck: one dense time map `L_s → L_{s−1}`.
#[derive(Clone, Debug)]
pub struct FullConnectParams {
    pub w: ParamId,
    pub dropout: f64,
}

impl FullConnectParams {
    pub fn init(
        b: &mut ParamBuilder<'_>,
        scale: usize,
        coarse_len: usize,
        fine_len: usize,
        dropout: f64,
    ) -> Self {
        Self {
            w: b.uniform(
                format!("inter.{scale}.full.w"),
                &[coarse_len, fine_len],
                coarse_len,
            ),
            dropout,
        }
    }

    pub fn param_count(coarse_len: usize, fine_len: usize) -> usize {
        coarse_len * fine_len
    }
}

pub fn full_connect_forward(
    g: &mut Graph,
    z_hat: Var,
    x_finer: Var,
    p: &FullConnectParams,
    bound: &Bound,
) -> Result<Var> {
    let mapped = g.affine(z_hat, bound[p.w], None, Axis::Time)?;
    let mapped = g.dropout(mapped, p.dropout)?;
    Ok(g.add(mapped, x_finer)?)
}

/// How information moves from scale `s` into scale `s − 1`.
#[derive(Clone, Debug)]
pub enum InterBlock {
    /// No interaction: `X̂^{s−1} = X^{s−1}`.
    Skip,
    Bottleneck(InterScaleParams),
    LastNode(LastNodeParams),
    FullConnect(FullConnectParams),
}

/// Per-scale blocks of the interaction module.
#[derive(Clone, Debug)]
pub struct InteractionParams {
    /// Indexed by scale `0..=C`; `None` skips the intra block (`Ẑ^s = X̂^s`).
    pub intra: Vec<Option<IntraScaleParams>>,
    /// Indexed by `s − 1` for the transition `s → s − 1`, `s ∈ 1..=C`.
    pub inter: Vec<InterBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Intra(usize),
    /// Transition from the given coarser scale into the next finer one.
    Inter(usize),
}

#[derive(Clone, Debug)]
pub struct InteractionOutput {
    /// `[Ẑ⁰, …, Ẑ^C]`.
    pub z_hats: Vec<Var>,
    /// `[X̂⁰, …, X̂^C]`, the inputs the intra blocks saw.
    pub x_hats: Vec<Var>,
    /// Per-scale intra block internals, when the block ran.
    pub intra: Vec<Option<IntraOutput>>,
    /// Blocks in execution order.
    pub trace: Vec<Step>,
}

/// Runs the intra/inter blocks alternately from the coarsest scale down.
pub fn run_interaction(
    g: &mut Graph,
    levels: &[Var],
    p: &InteractionParams,
    bound: &Bound,
) -> Result<InteractionOutput> {
    let scales = levels.len();
    if scales == 0 || p.intra.len() != scales || p.inter.len() + 1 != scales {
        return Err(Error::Config(format!(
            "interaction expects {} intra and {} inter blocks for {scales} levels, got {} and {}",
            scales,
            scales.saturating_sub(1),
            p.intra.len(),
            p.inter.len()
        )));
    }
    let top = scales - 1;
    let mut z_hats = vec![None; scales];
    let mut x_hats = vec![None; scales];
    let mut intra_out = vec![None; scales];
    let mut trace = Vec::with_capacity(2 * scales - 1);

    let mut x_hat = levels[top];
    for s in (0..=top).rev() {
        x_hats[s] = Some(x_hat);
        let z_hat = match &p.intra[s] {
            Some(block) => {
                trace.push(Step::Intra(s));
                let out = intra_scale_forward(g, x_hat, block, bound)?;
                intra_out[s] = Some(out);
                out.gated
            }
            None => x_hat,
        };
        z_hats[s] = Some(z_hat);
        if s == 0 {
            break;
        }
        let finer = levels[s - 1];
        x_hat = match &p.inter[s - 1] {
            InterBlock::Skip => finer,
            InterBlock::Bottleneck(block) => {
                trace.push(Step::Inter(s));
                inter_scale_forward(g, z_hat, finer, block, bound)?
            }
            InterBlock::LastNode(block) => {
                trace.push(Step::Inter(s));
                let hidden = intra_out[s]
                    .ok_or_else(|| {
                        Error::Config("last-node interaction needs an intra block".into())
                    })?
                    .hidden;
                last_node_forward(g, hidden, finer, block, bound)?
            }
            InterBlock::FullConnect(block) => {
                trace.push(Step::Inter(s));
                full_connect_forward(g, z_hat, finer, block, bound)?
            }
        };
    }

    Ok(InteractionOutput {
        z_hats: z_hats
            .into_iter()
            .map(|v| v.expect("every scale visited"))
            .collect(),
        x_hats: x_hats
            .into_iter()
            .map(|v| v.expect("every scale visited"))
            .collect(),
        intra: intra_out,
        trace,
    })
}
