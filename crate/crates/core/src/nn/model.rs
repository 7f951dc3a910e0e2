//! The two-block convolutional classifier: construction, forward pass with
//! a replayable cache, and exact backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::tensor::{col2im_same, dropout, im2col_same, maxpool2d, sigmoid, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::features::Mode;
use crate::rng;

const K: usize = 3;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Channels of the first and second convolution block.
    pub channels: [usize; 2],
    pub dense_hidden: usize,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
}

impl ModelConfig {
    /// 32/64 channels, 128 hidden units, dropout 0.25 and 0.5. Ex-post
    /// images have 13 rows, ex-ante images 12.
    pub fn standard(mode: Mode, f: usize) -> Self {
        let h = match mode {
            Mode::ExPost => 13,
            Mode::ExAnte => 12,
        };
        Self::for_input(h, f)
    }

    pub fn for_input(h: usize, w: usize) -> Self {
        ModelConfig {
            input_h: h,
            input_w: w,
            channels: [32, 64],
            dense_hidden: 128,
            conv_dropout: 0.25,
            dense_dropout: 0.5,
        }
    }

    /// Spatial size after both pools.
    pub fn pooled_hw(&self) -> (usize, usize) {
        (self.input_h / 2 / 2, self.input_w / 2 / 2)
    }

    pub fn flatten_size(&self) -> usize {
        let (h, w) = self.pooled_hw();
        h * w * self.channels[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h < 4 || self.input_w < 4 {
            return Err(Error::Shape(format!(
                "input {}x{} is too small for two 2x2 pools",
                self.input_h, self.input_w
            )));
        }
        if self.channels.contains(&0) || self.dense_hidden == 0 {
            return Err(Error::invalid("channel and hidden widths must be positive"));
        }
        for p in [self.conv_dropout, self.dense_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar> {
    /// 3x3 same-padded convolution; weight `[out, in, 3, 3]`.
    Conv {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Relu,
    MaxPool,
    Dropout(f64),
    Flatten,
    /// Fully connected; weight `[out, in]`.
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Sigmoid,
}

impl<T: Scalar> Layer<T> {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool => "maxpool",
            Layer::Dropout(_) => "dropout",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
            Layer::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<T>>,
    pub adam: AdamState<T>,
}

/// Gradients in [`Model::param_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T: Scalar = f32> {
    pub tensors: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    PoolArg(Vec<u32>),
    Mask(Vec<T>),
}

/// Everything the backward pass and the explainers need from a forward
/// pass. `inputs[i]` is the input of layer `i`; the output of the last
/// layer is `probs`.
#[derive(Debug, Clone)]
pub struct Cache<T: Scalar = f32> {
    inputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    probs: Vec<T>,
}

impl<T: Scalar> Cache<T> {
    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    /// Pre-sigmoid scores.
    pub fn logits(&self) -> &[T] {
        self.inputs.last().map(|t| t.data()).unwrap_or(&[])
    }

    /// Input of layer `i`, equivalently the output of layer `i - 1`.
    pub fn input(&self, i: usize) -> Option<&Tensor<T>> {
        self.inputs.get(i)
    }

    pub fn batch_size(&self) -> usize {
        self.probs.len()
    }
}

fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, r: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(r.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl<T: Scalar> Model<T> {
    /// Builds the layer stack with He-uniform weights, `U(±sqrt(6/fan_in))`,
    /// and zero biases.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[rng::TAG_INIT]);
        let [c1, c2] = config.channels;
        let mut layers = Vec::new();
        let mut cin = 1;
        for c in [c1, c2] {
            for _ in 0..2 {
                layers.push(Layer::Conv {
                    weight: he_uniform(vec![c, cin, K, K], cin * K * K, &mut r),
                    bias: Tensor::zeros(vec![c]),
                });
                layers.push(Layer::Relu);
                cin = c;
            }
            layers.push(Layer::MaxPool);
            layers.push(Layer::Dropout(config.conv_dropout));
        }
        let flat = config.flatten_size();
        let hid = config.dense_hidden;
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense {
            weight: he_uniform(vec![hid, flat], flat, &mut r),
            bias: Tensor::zeros(vec![hid]),
        });
        layers.push(Layer::Relu);
        layers.push(Layer::Dropout(config.dense_dropout));
        layers.push(Layer::Dense {
            weight: he_uniform(vec![1, hid], hid, &mut r),
            bias: Tensor::zeros(vec![1]),
        });
        layers.push(Layer::Sigmoid);
        let mut m = Model {
            config,
            layers,
            adam: AdamState::default(),
        };
        m.adam = AdamState::new(&m.params());
        Ok(m)
    }

    /// Parameter names such as `conv1.weight` or `dense2.bias`.
    pub fn param_names(&self) -> Vec<String> {
        let (mut nc, mut nd) = (0, 0);
        let mut names = Vec::new();
        for l in &self.layers {
            let prefix = match l {
                Layer::Conv { .. } => {
                    nc += 1;
                    format!("conv{nc}")
                }
                Layer::Dense { .. } => {
                    nd += 1;
                    format!("dense{nd}")
                }
                _ => continue,
            };
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Conv { weight, bias } | Layer::Dense { weight, bias } = l {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::Conv { weight, bias } | Layer::Dense { weight, bias } = l {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Same weights in another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { weight, bias } => Layer::Conv {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::Dense { weight, bias } => Layer::Dense {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::Relu => Layer::Relu,
                Layer::MaxPool => Layer::MaxPool,
                Layer::Dropout(p) => Layer::Dropout(*p),
                Layer::Flatten => Layer::Flatten,
                Layer::Sigmoid => Layer::Sigmoid,
            })
            .collect();
        let mut m = Model {
            config: self.config.clone(),
            layers,
            adam: AdamState::default(),
        };
        m.adam = AdamState::new(&m.params());
        m
    }

    /// Index into [`Cache::input`] holding the post-ReLU output of the
    /// `n`-th convolution (1-based).
    pub fn conv_activation_index(&self, n: usize) -> Result<usize> {
        let convs: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. }))
            .map(|(i, _)| i)
            .collect();
        if n == 0 || n > convs.len() {
            return Err(Error::invalid(format!(
                "conv layer {n} out of range 1..={}",
                convs.len()
            )));
        }
        Ok(convs[n - 1] + 2)
    }

    /// Index into [`Cache::input`] holding the output of the last
    /// convolution block (after pooling, before its dropout).
    pub fn last_block_index(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::MaxPool))
            .expect("model has pooling layers")
            + 1
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (h, w) = (self.config.input_h, self.config.input_w);
        match x.shape() {
            &[b, 1, hh, ww] | &[b, hh, ww, 1] if hh == h && ww == w && b > 0 => Ok(b),
            s => Err(Error::Shape(format!("expected a [B, {h}, {w}, 1] batch, got {s:?}"))),
        }
    }

    /// Runs the network. In training mode dropout masks are drawn from a
    /// stream derived from `seed`; at inference `seed` is ignored.
    pub fn forward(&self, x: &Tensor<T>, training: bool, seed: u64) -> Result<Cache<T>> {
        let b = self.check_input(x)?;
        let mut cur = x
            .clone()
            .reshape(vec![b, 1, self.config.input_h, self.config.input_w])?;
        let mut r = rng::stream(seed, &[rng::TAG_DROPOUT]);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, a) = match layer {
                Layer::Conv { weight, bias } => (conv_forward(&cur, weight, bias)?, Aux::None),
                Layer::Relu => (cur.map(|v| v.max(T::zero())), Aux::None),
                Layer::MaxPool => {
                    let &[b, c, h, w] = cur.shape() else {
                        return Err(Error::Shape("pool expects 4-D".into()));
                    };
                    let (y, arg) = maxpool2d(cur.data(), b * c, h, w)?;
                    (Tensor::new(vec![b, c, h / 2, w / 2], y)?, Aux::PoolArg(arg))
                }
                Layer::Dropout(p) => {
                    let (y, mask) = dropout(&cur, *p, training, &mut r)?;
                    (y, Aux::Mask(mask))
                }
                Layer::Flatten => {
                    let n = cur.len() / b;
                    (cur.clone().reshape(vec![b, n])?, Aux::None)
                }
                Layer::Dense { weight, bias } => (dense_forward(&cur, weight, bias)?, Aux::None),
                Layer::Sigmoid => (cur.map(sigmoid), Aux::None),
            };
            inputs.push(cur);
            aux.push(a);
            cur = out;
        }
        let probs = cur.into_data();
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite network output".into()));
        }
        Ok(Cache { inputs, aux, probs })
    }

    /// Inference-mode probabilities.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.forward(x, false, 0)?.probs)
    }

    /// Gradients of the mean binary cross-entropy over the cached batch.
    /// The sigmoid and loss are differentiated together: `dL/dz = (p - y)/B`.
    pub fn backward(&self, cache: &Cache<T>, y: &[u8]) -> Result<Grads<T>> {
        let b = cache.batch_size();
        if y.len() != b {
            return Err(Error::Shape(format!("{} labels for a batch of {b}", y.len())));
        }
        let inv = T::from_f64(1.0 / b as f64);
        let dz = cache
            .probs
            .iter()
            .zip(y)
            .map(|(&p, &y)| (p - T::from_f64(y as f64)) * inv)
            .collect();
        Ok(self.backward_from(cache, dz, None)?.0)
    }

    /// Backpropagates an arbitrary gradient on the logits. When `capture`
    /// is `Some(i)` the gradient with respect to [`Cache::input`]`(i)` is
    /// returned as well.
    pub fn backward_from(
        &self,
        cache: &Cache<T>,
        dlogit: Vec<T>,
        capture: Option<usize>,
    ) -> Result<(Grads<T>, Option<Tensor<T>>)> {
        let n = self.layers.len();
        if cache.inputs.len() != n {
            return Err(Error::invalid("cache does not belong to this model"));
        }
        let b = cache.batch_size();
        if dlogit.len() != b {
            return Err(Error::Shape("logit gradient has the wrong length".into()));
        }
        let mut g = Tensor::new(vec![b, 1], dlogit)?;
        let mut captured = if capture == Some(n - 1) { Some(g.clone()) } else { None };
        let mut grads: Vec<Tensor<T>> = Vec::new();
        for i in (0..n - 1).rev() {
            let x = &cache.inputs[i];
            let need_dx = i > 0 || capture == Some(0);
            g = match (&self.layers[i], &cache.aux[i]) {
                (Layer::Conv { weight, .. }, _) => {
                    let (dx, dw, db) = conv_backward(x, weight, &g, need_dx)?;
                    grads.push(db);
                    grads.push(dw);
                    dx
                }
                (Layer::Dense { weight, .. }, _) => {
                    let (dx, dw, db) = dense_backward(x, weight, &g)?;
                    grads.push(db);
                    grads.push(dw);
                    dx
                }
                (Layer::Relu, _) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
                (Layer::MaxPool, Aux::PoolArg(arg)) => {
                    let &[_, _, h, w] = x.shape() else { unreachable!() };
                    let plane_out = (h / 2) * (w / 2);
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    let d = dx.data_mut();
                    for (o, (&gv, &a)) in g.data().iter().zip(arg).enumerate() {
                        let p = o / plane_out;
                        d[p * h * w + a as usize] = d[p * h * w + a as usize] + gv;
                    }
                    dx
                }
                (Layer::Dropout(_), Aux::Mask(mask)) => {
                    let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
                (Layer::Flatten, _) => g.reshape(x.shape().to_vec())?,
                (l, _) => return Err(Error::invalid(format!("cannot backpropagate through {}", l.kind()))),
            };
            if capture == Some(i) {
                captured = Some(g.clone());
            }
        }
        grads.reverse();
        Ok((Grads { tensors: grads }, captured))
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, cin, h, wd] = x.shape() else {
        return Err(Error::Shape("conv expects 4-D input".into()));
    };
    let &[cout, wcin, _, _] = w.shape() else {
        return Err(Error::Shape("conv weight must be 4-D".into()));
    };
    if wcin != cin {
        return Err(Error::Shape(format!("conv expects {wcin} channels, got {cin}")));
    }
    let hw = h * wd;
    let kk = cin * K * K;
    let mut cols = vec![T::zero(); kk * hw];
    let mut out = vec![T::zero(); b * cout * hw];
    for s in 0..b {
        im2col_same(&x.data()[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, K, &mut cols);
        let y = &mut out[s * cout * hw..(s + 1) * cout * hw];
        for (co, chunk) in y.chunks_mut(hw).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        T::gemm(cout, kk, hw, w.data(), kk, 1, &cols, hw, 1, T::one(), y, hw, 1);
    }
    Tensor::new(vec![b, cout, h, wd], out)
}

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let &[b, cin, h, wd] = x.shape() else { unreachable!() };
    let cout = w.shape()[0];
    let hw = h * wd;
    let kk = cin * K * K;
    let mut cols = vec![T::zero(); kk * hw];
    let mut dcols = vec![T::zero(); kk * hw];
    let mut dw = vec![T::zero(); cout * kk];
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    for s in 0..b {
        let g = &dy.data()[s * cout * hw..(s + 1) * cout * hw];
        for (co, chunk) in g.chunks(hw).enumerate() {
            db[co] = chunk.iter().fold(db[co], |a, &v| a + v);
        }
        im2col_same(&x.data()[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, K, &mut cols);
        // dW += dY (cout x hw) * cols^T (hw x kk)
        T::gemm(cout, hw, kk, g, hw, 1, &cols, 1, hw, T::one(), &mut dw, kk, 1);
        if need_dx {
            // dcols = W^T (kk x cout) * dY (cout x hw)
            T::gemm(kk, cout, hw, w.data(), 1, kk, g, hw, 1, T::zero(), &mut dcols, hw, 1);
            col2im_same(&dcols, cin, h, wd, K, &mut dx[s * cin * hw..(s + 1) * cin * hw]);
        }
    }
    let dx = if need_dx {
        Tensor::new(x.shape().to_vec(), dx)?
    } else {
        Tensor::zeros(vec![0])
    };
    Ok((dx, Tensor::new(w.shape().to_vec(), dw)?, Tensor::new(vec![cout], db)?))
}

fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, nin] = x.shape() else {
        return Err(Error::Shape("dense expects 2-D input".into()));
    };
    let &[nout, win] = w.shape() else {
        return Err(Error::Shape("dense weight must be 2-D".into()));
    };
    if win != nin {
        return Err(Error::Shape(format!("dense expects {win} inputs, got {nin}")));
    }
    let mut out: Vec<T> = (0..b).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(
        b,
        nin,
        nout,
        x.data(),
        nin,
        1,
        w.data(),
        1,
        nin,
        T::one(),
        &mut out,
        nout,
        1,
    );
    Tensor::new(vec![b, nout], out)
}

fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let &[b, nin] = x.shape() else { unreachable!() };
    let nout = w.shape()[0];
    let mut dw = vec![T::zero(); nout * nin];
    // dW = dY^T (nout x b) * X (b x nin)
    T::gemm(
        nout,
        b,
        nin,
        dy.data(),
        1,
        nout,
        x.data(),
        nin,
        1,
        T::zero(),
        &mut dw,
        nin,
        1,
    );
    let mut db = vec![T::zero(); nout];
    for row in dy.data().chunks(nout) {
        for (d, v) in db.iter_mut().zip(row) {
            *d = *d + *v;
        }
    }
    let mut dx = vec![T::zero(); b * nin];
    T::gemm(
        b,
        nout,
        nin,
        dy.data(),
        nout,
        1,
        w.data(),
        nin,
        1,
        T::zero(),
        &mut dx,
        nin,
        1,
    );
    Ok((
        Tensor::new(vec![b, nin], dx)?,
        Tensor::new(vec![nout, nin], dw)?,
        Tensor::new(vec![nout], db)?,
    ))
}
