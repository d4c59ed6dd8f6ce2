//! Layer handles: parameter ids plus the graph calls that use them.

use crate::autograd::Var;
use crate::params::{BnUpdate, Ctx, Initializer, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            init.weight(vec![fan_out, fan_in], fan_in, gain),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Trainable,
            init.zeros(vec![fan_out]),
        );
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, ctx: &mut Ctx<T>, x: Var) -> Var {
        let w = ctx.param(store, self.weight);
        let b = ctx.param(store, self.bias);
        ctx.graph.linear(x, w, Some(b))
    }
}

/// Bias-free 1D convolution (always followed by batch norm).
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            init.weight(vec![cout, cin, kernel], cin * kernel, 2.0),
        );
        Self {
            weight,
            kernel,
            stride,
        }
    }

    /// Same padding: output length is `ceil(L / stride)`.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, ctx: &mut Ctx<T>, x: Var) -> Var {
        let w = ctx.param(store, self.weight);
        ctx.graph.conv1d(x, w, self.stride, (self.kernel - 1) / 2)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::Trainable,
            init.ones(vec![channels]),
        );
        let beta = store.add(
            format!("{name}.beta"),
            ParamKind::Trainable,
            init.zeros(vec![channels]),
        );
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ParamKind::Buffer,
            crate::tensor::Tensor::zeros(vec![channels]),
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            crate::tensor::Tensor::full(vec![channels], T::one()),
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    /// Batch statistics in train mode (recorded for the running update),
    /// running statistics in eval mode.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, ctx: &mut Ctx<T>, x: Var) -> Var {
        let g = ctx.param(store, self.gamma);
        let b = ctx.param(store, self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.graph.batch_norm_train(x, g, b, BN_EPS);
                ctx.record_bn(BnUpdate {
                    store: store.prefix().to_string(),
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                y
            }
            Mode::Eval => ctx.graph.batch_norm_eval(
                x,
                g,
                b,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
                BN_EPS,
            ),
        }
    }
}

/// Scale a nominal layer width by the model multiplier (at least 1).
pub fn scaled(width: usize, multiplier: f64) -> usize {
    ((width as f64 * multiplier).round() as usize).max(1)
}
