//! Reference forecasters: last value, seasonal repeat and a learned linear map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Axis, Graph, Tensor, TensorError, Var};
use crate::training::{forecast_frozen, Forecaster, Trainable};
use crate::{Error, Result};

fn check_input(x: &Tensor, input_len: usize) -> Result<()> {
    if x.rank() != 2 || x.rows() != input_len {
        return Err(TensorError::Shape {
            op: "baseline input",
            lhs: vec![input_len],
            rhs: x.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Repeats the last observed row.
#[derive(Clone, Debug)]
pub struct Naive {
    pub input_len: usize,
    pub horizon: usize,
}

impl Forecaster for Naive {
    fn input_len(&self) -> usize {
        self.input_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_len)?;
        let d = x.cols();
        let last = &x.values()[(x.rows() - 1) * d..];
        let values = (0..self.horizon)
            .flat_map(|_| last.iter().copied())
            .collect();
        Ok(Tensor::new(vec![self.horizon, d], values)?)
    }
}

/// `ŷ[T + h] = x[T + h − period·k]` for the smallest `k` that lands inside the window.
#[derive(Clone, Debug)]
pub struct SeasonalNaive {
    pub input_len: usize,
    pub horizon: usize,
    pub period: usize,
}

impl SeasonalNaive {
    pub fn new(input_len: usize, horizon: usize, period: usize) -> Result<Self> {
        if period == 0 || period > input_len {
            return Err(Error::Config(format!(
                "seasonal period {period} must lie in 1..={input_len}"
            )));
        }
        Ok(Self {
            input_len,
            horizon,
            period,
        })
    }
}

impl Forecaster for SeasonalNaive {
    fn input_len(&self) -> usize {
        self.input_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_len)?;
        let (t, d) = (x.rows(), x.cols());
        let mut values = Vec::with_capacity(self.horizon * d);
        for h in 0..self.horizon {
            let src = t - self.period + h % self.period;
            values.extend_from_slice(&x.values()[src * d..(src + 1) * d]);
        }
        Ok(Tensor::new(vec![self.horizon, d], values)?)
    }
}

/// Time-axis affine map `T → H` applied to every channel with shared weights.
#[derive(Clone, Debug)]
pub struct LinearMap {
    input_len: usize,
    horizon: usize,
    params: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl LinearMap {
    pub fn new(input_len: usize, horizon: usize, seed: u64) -> Result<Self> {
        if input_len == 0 || horizon == 0 {
            return Err(Error::Config(
                "linear map needs positive input length and horizon".into(),
            ));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let w = b.uniform("linear.w", &[input_len, horizon], input_len);
        let bias = b.uniform("linear.b", &[horizon], input_len);
        Ok(Self {
            input_len,
            horizon,
            params,
            w,
            b: bias,
        })
    }
}

impl Forecaster for LinearMap {
    fn input_len(&self) -> usize {
        self.input_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        forecast_frozen(self, x)
    }
}

impl Trainable for LinearMap {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        Ok(g.affine(x, bound[self.w], Some(bound[self.b]), Axis::Time)?)
    }
}
