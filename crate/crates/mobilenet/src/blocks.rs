//! Composite blocks: conv-bn-activation, squeeze-excitation and the inverted
//! residual bottleneck shared by MobileNetV2 and MobileNetV3.

use rand_chacha::ChaCha8Rng;

use crate::layers::{
    global_avg_pool, global_avg_pool_backward, join, Activation, ActivationKind, BatchNorm2d,
    Conv2d, Cost, Layer, Linear, Visitor,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct NormConfig {
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Activation>,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: Option<ActivationKind>,
        norm: NormConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, kernel, stride, groups, false, rng),
            bn: BatchNorm2d::new(out_ch, norm.eps, norm.momentum),
            act: act.map(Activation::new),
        }
    }

    /// Visits with the conv and norm under explicit names (MobileNetV2 names
    /// its projection conv and norm as siblings rather than children).
    fn visit_split(&mut self, conv_prefix: &str, bn_prefix: &str, f: &mut Visitor<'_>) {
        self.conv.visit(conv_prefix, f);
        self.bn.visit(bn_prefix, f);
    }
}

impl Layer for ConvBnAct {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.conv.forward(x, train);
        let y = self.bn.forward(&y, train);
        match &mut self.act {
            Some(a) => a.forward(&y, train),
            None => y,
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = match &mut self.act {
            Some(a) => a.backward(grad),
            None => grad.clone(),
        };
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.visit_split(&join(prefix, "0"), &join(prefix, "1"), f);
    }

    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost) {
        let (s, mut cost) = self.conv.profile(shape);
        let (s, c2) = self.bn.profile(s);
        cost += c2;
        (s, cost)
    }
}

/// Channel attention: pooled descriptor → fc → ReLU → fc → hard-sigmoid gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
    relu: Activation,
    gate: Activation,
    cache: Option<(Tensor, Tensor)>,
}

impl SqueezeExcite {
    pub fn new(channels: usize, squeeze: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::pointwise(channels, squeeze, rng),
            fc2: Linear::pointwise(squeeze, channels, rng),
            relu: Activation::new(ActivationKind::Relu),
            gate: Activation::new(ActivationKind::Hardsigmoid),
            cache: None,
        }
    }
}

impl Layer for SqueezeExcite {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let pooled = global_avg_pool(x);
        let s = self.fc1.forward(&pooled, train);
        let s = self.relu.forward(&s, train);
        let s = self.fc2.forward(&s, train);
        let scale = self.gate.forward(&s, train);
        let plane = x.plane();
        let mut out = x.clone();
        for (i, sv) in scale.data.iter().enumerate() {
            out.data[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v *= sv);
        }
        if train {
            self.cache = Some((x.clone(), scale));
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (x, scale) = self.cache.take().expect("squeeze-excite backward without training forward");
        let plane = x.plane();
        let mut dx = grad.clone();
        let mut dscale = Tensor::zeros(scale.shape);
        for (i, sv) in scale.data.iter().enumerate() {
            let r = i * plane..(i + 1) * plane;
            dscale.data[i] = grad.data[r.clone()].iter().zip(&x.data[r.clone()]).map(|(g, v)| g * v).sum();
            dx.data[r].iter_mut().for_each(|d| *d *= sv);
        }
        let g = self.gate.backward(&dscale);
        let g = self.fc2.backward(&g);
        let g = self.relu.backward(&g);
        let dpooled = self.fc1.backward(&g);
        dx.add_assign(&global_avg_pool_backward(&dpooled, x.shape));
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost) {
        let mut cost = self.fc1.profile([1, shape[1], 1, 1]).1;
        cost += self.fc2.profile([1, self.fc1.out_features, 1, 1]).1;
        (shape, cost)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NamingStyle {
    /// `conv.{i}` children, projection conv and norm as siblings.
    V2,
    /// `block.{i}` children, every stage a conv-norm-act group.
    V3,
}

/// Expand (1x1) → depthwise (kxk, strided) → optional SE → linear project (1x1),
/// with an identity shortcut when shapes allow.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: Option<ConvBnAct>,
    pub depthwise: ConvBnAct,
    pub se: Option<SqueezeExcite>,
    pub project: ConvBnAct,
    pub residual: bool,
    pub naming: NamingStyle,
}

impl Layer for InvertedResidual {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut y = match &mut self.expand {
            Some(e) => e.forward(x, train),
            None => x.clone(),
        };
        y = self.depthwise.forward(&y, train);
        if let Some(se) = &mut self.se {
            y = se.forward(&y, train);
        }
        y = self.project.forward(&y, train);
        if self.residual {
            y.add_assign(x);
        }
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = self.project.backward(grad);
        if let Some(se) = &mut self.se {
            g = se.backward(&g);
        }
        g = self.depthwise.backward(&g);
        if let Some(e) = &mut self.expand {
            g = e.backward(&g);
        }
        if self.residual {
            g.add_assign(grad);
        }
        g
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let mut idx = 0;
        match self.naming {
            NamingStyle::V2 => {
                let base = join(prefix, "conv");
                if let Some(e) = &mut self.expand {
                    e.visit(&join(&base, &idx.to_string()), f);
                    idx += 1;
                }
                self.depthwise.visit(&join(&base, &idx.to_string()), f);
                idx += 1;
                let conv = join(&base, &idx.to_string());
                let bn = join(&base, &(idx + 1).to_string());
                self.project.visit_split(&conv, &bn, f);
            }
            NamingStyle::V3 => {
                let base = join(prefix, "block");
                if let Some(e) = &mut self.expand {
                    e.visit(&join(&base, &idx.to_string()), f);
                    idx += 1;
                }
                self.depthwise.visit(&join(&base, &idx.to_string()), f);
                idx += 1;
                if let Some(se) = &mut self.se {
                    se.visit(&join(&base, &idx.to_string()), f);
                    idx += 1;
                }
                self.project.visit(&join(&base, &idx.to_string()), f);
            }
        }
    }

    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost) {
        let mut cost = Cost::default();
        let mut s = shape;
        if let Some(e) = &self.expand {
            let (ns, c) = e.profile(s);
            s = ns;
            cost += c;
        }
        let (ns, c) = self.depthwise.profile(s);
        s = ns;
        cost += c;
        if let Some(se) = &self.se {
            cost += se.profile(s).1;
        }
        let (ns, c) = self.project.profile(s);
        cost += c;
        (ns, cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn squeeze_excite_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let se = SqueezeExcite::new(4, 8, &mut rng);
        let x = Tensor::from_vec([2, 4, 2, 3], (0..48).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect());
        let r: Vec<f32> = (0..48).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect();
        let loss = |x: &Tensor| -> f64 {
            let mut s = se.clone();
            s.forward(x, true).data.iter().zip(&r).map(|(a, b)| (a * b) as f64).sum()
        };
        let mut s = se.clone();
        s.forward(&x, true);
        let dx = s.backward(&Tensor::from_vec([2, 4, 2, 3], r.clone()));
        for i in 0..48 {
            let mut xp = x.clone();
            xp.data[i] += 1e-2;
            let mut xm = x.clone();
            xm.data[i] -= 1e-2;
            let fd = (loss(&xp) - loss(&xm)) / 2e-2;
            assert!((fd - dx.data[i] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "{i}: {fd} vs {}", dx.data[i]);
        }
    }
}
