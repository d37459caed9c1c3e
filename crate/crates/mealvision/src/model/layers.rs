//! Parameter-owning layer descriptors and the forward-pass context.

use crate::nn::{he_init, NodeId, ParamId, ParamKind, ParamStore, Scalar, Shape, Tape, Tensor};
use crate::rng::Rng;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

pub struct Deconv {
    pub w: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Conv {
        let w = store.add(
            &format!("{name}.w"),
            he_init(Shape::new(c_out, c_in, k, k), c_in * k * k, rng),
            ParamKind::Weight,
        );
        let b = bias.then(|| {
            store.add(
                &format!("{name}.b"),
                Tensor::zeros(Shape::new(c_out, 1, 1, 1)),
                ParamKind::NoDecay,
            )
        });
        Conv { w, b, stride, pad }
    }

    /// Output-layer variant: small fixed-std weights so predictions start
    /// near zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new_head<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        std: f64,
    ) -> Conv {
        let shape = Shape::new(c_out, c_in, k, k);
        let data = (0..shape.numel())
            .map(|_| S::from_f64(rng.normal() * std))
            .collect();
        let w = store.add(
            &format!("{name}.w"),
            Tensor::from_vec(shape, data),
            ParamKind::Weight,
        );
        let b = Some(store.add(
            &format!("{name}.b"),
            Tensor::zeros(Shape::new(c_out, 1, 1, 1)),
            ParamKind::NoDecay,
        ));
        Conv {
            w,
            b,
            stride: 1,
            pad: 0,
        }
    }
}

impl Deconv {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Deconv {
        // (C_in, C_out, k, k); kernel 3, stride 2 doubles the resolution
        let w = store.add(
            &format!("{name}.w"),
            he_init(Shape::new(c_in, c_out, k, k), c_in * k * k, rng),
            ParamKind::Weight,
        );
        Deconv {
            w,
            stride: 2,
            pad: 1,
            out_pad: 1,
        }
    }
}

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Norm {
        let shape = Shape::new(channels, 1, 1, 1);
        Norm {
            gamma: store.add(
                &format!("{name}.gamma"),
                Tensor::filled(shape, S::ONE),
                ParamKind::NoDecay,
            ),
            beta: store.add(
                &format!("{name}.beta"),
                Tensor::zeros(shape),
                ParamKind::NoDecay,
            ),
            running_mean: store.add(
                &format!("{name}.running_mean"),
                Tensor::zeros(shape),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                &format!("{name}.running_var"),
                Tensor::filled(shape, S::ONE),
                ParamKind::Buffer,
            ),
        }
    }
}

impl Dense {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Dense {
        Dense {
            w: store.add(
                &format!("{name}.w"),
                he_init(Shape::new(d_out, d_in, 1, 1), d_in, rng),
                ParamKind::Weight,
            ),
            b: store.add(
                &format!("{name}.b"),
                Tensor::zeros(Shape::new(d_out, 1, 1, 1)),
                ParamKind::NoDecay,
            ),
        }
    }

    /// Output-layer variant with small fixed-std weights and an optional
    /// constant bias (e.g. priming a regression output at the target mean).
    pub fn new_head<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        bias_value: f64,
    ) -> Dense {
        let data = (0..d_out * d_in)
            .map(|_| S::from_f64(rng.normal() * std))
            .collect();
        Dense {
            w: store.add(
                &format!("{name}.w"),
                Tensor::from_vec(Shape::new(d_out, d_in, 1, 1), data),
                ParamKind::Weight,
            ),
            b: store.add(
                &format!("{name}.b"),
                Tensor::filled(Shape::new(d_out, 1, 1, 1), S::from_f64(bias_value)),
                ParamKind::NoDecay,
            ),
        }
    }
}

/// Pending running-statistics update from one training forward pass.
pub struct BnUpdate<S: Scalar> {
    pub mean_param: ParamId,
    pub var_param: ParamId,
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
}

/// Everything a layer needs to append itself to the tape.
pub struct ForwardCtx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub store: &'a ParamStore<S>,
    pub train: bool,
    pub bn_updates: Vec<BnUpdate<S>>,
}

impl<'a, S: Scalar> ForwardCtx<'a, S> {
    pub fn new(tape: &'a mut Tape<S>, store: &'a ParamStore<S>, train: bool) -> Self {
        ForwardCtx {
            tape,
            store,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn conv(&mut self, x: NodeId, layer: &Conv) -> NodeId {
        let w = self.tape.param(self.store, layer.w);
        let b = layer.b.map(|b| self.tape.param(self.store, b));
        self.tape.conv2d(x, w, b, layer.stride, layer.pad)
    }

    pub fn deconv(&mut self, x: NodeId, layer: &Deconv) -> NodeId {
        let w = self.tape.param(self.store, layer.w);
        self.tape
            .deconv2d(x, w, None, layer.stride, layer.pad, layer.out_pad)
    }

    pub fn bn(&mut self, x: NodeId, layer: &Norm) -> NodeId {
        let gamma = self.tape.param(self.store, layer.gamma);
        let beta = self.tape.param(self.store, layer.beta);
        if self.train {
            let (node, mean, var) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS);
            self.bn_updates.push(BnUpdate {
                mean_param: layer.running_mean,
                var_param: layer.running_var,
                batch_mean: mean,
                batch_var: var,
            });
            node
        } else {
            let rm = self.store.value(layer.running_mean).data.clone();
            let rv = self.store.value(layer.running_var).data.clone();
            self.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }

    pub fn bn_relu(&mut self, x: NodeId, layer: &Norm) -> NodeId {
        let n = self.bn(x, layer);
        self.tape.relu(n)
    }

    pub fn dense(&mut self, x: NodeId, layer: &Dense) -> NodeId {
        let w = self.tape.param(self.store, layer.w);
        let b = self.tape.param(self.store, layer.b);
        self.tape.linear(x, w, Some(b))
    }
}

/// Applies the pending running-stat updates after the optimizer step.
pub fn apply_bn_updates<S: Scalar>(store: &mut ParamStore<S>, updates: &[BnUpdate<S>]) {
    let m = S::from_f64(BN_MOMENTUM);
    let one_minus = S::from_f64(1.0 - BN_MOMENTUM);
    for u in updates {
        let rm = store.value_mut(u.mean_param);
        for (r, &b) in rm.data.iter_mut().zip(&u.batch_mean) {
            *r = *r * one_minus + b * m;
        }
        let rv = store.value_mut(u.var_param);
        for (r, &b) in rv.data.iter_mut().zip(&u.batch_var) {
            *r = *r * one_minus + b * m;
        }
    }
}
