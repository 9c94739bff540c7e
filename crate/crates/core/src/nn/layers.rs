use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{init_normal, ParamId, ParamStore, Session};
use super::tape::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_normal(rng, &[cout, cin, kernel, kernel], fan_in, gain),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        s.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// 2x2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Deconv2x {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv2x {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_normal(rng, &[cin, cout, 2, 2], cin, 2f64.sqrt()),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout])));
        Self { weight, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        s.tape.conv_transpose2x2(x, w, Some(b))
    }
}

/// Row-wise affine map `x [N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_normal(rng, &[din, dout], din, gain),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[dout]))));
        Self { weight, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.weight);
        let y = s.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = s.p(b);
                s.tape.add_row_bias(y, b)
            }
            None => y,
        }
    }
}

/// Stride-2 residual block: `gelu(conv3x3(gelu(conv3x3_s2(x))) + conv1x1_s2(x))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub down: Conv2d,
    pub conv: Conv2d,
    pub skip: Conv2d,
}

impl ResBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let gain = 2f64.sqrt();
        Self {
            down: Conv2d::new(store, rng, &format!("{name}.down"), cin, cout, 3, 2, gain),
            conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv"),
                cout,
                cout,
                3,
                1,
                gain * 0.5,
            ),
            skip: Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 2, 1.0),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.down.forward(s, x);
        let h = s.tape.gelu(h);
        let h = self.conv.forward(s, h);
        let skip = self.skip.forward(s, x);
        let y = s.tape.add(h, skip);
        s.tape.gelu(y)
    }
}

/// Channel widths of a four-stage encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths(pub Vec<usize>);

impl Default for Widths {
    fn default() -> Self {
        Widths(vec![16, 32, 64, 128])
    }
}
