//! Reverse-mode automatic differentiation over a linear tape.

use super::conv::{self, ConvGeom};
use super::real::{gemm_new, Real};
use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation defined outside the engine. The caller computes the forward value;
/// the op only supplies the vector-Jacobian product.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradients for each input; entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ReflectPad { x: Var, pad: usize },
    Upsample2 { x: Var },
    InstanceNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Concat { a: Var, b: Var },
    Scale { x: Var, k: T },
    Linear { terms: Vec<(Var, T)> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. Build it with the op methods, then call [`Graph::backward`].
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, needs)
    }

    /// Zero-padded strided correlation; `w` is `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let wdims = self.value(w).dims().to_vec();
        assert_eq!(wdims.len(), 4);
        assert_eq!(wdims[1], cin, "conv2d channel mismatch");
        let cout = wdims[0];
        let geom = ConvGeom::new(cin, h, wd, wdims[2], stride, pad)
            .unwrap_or_else(|| panic!("conv2d kernel {} larger than padded input {h}x{wd}", wdims[2]));
        let (out, cols) = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &geom,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols = if self.needs(w) { cols } else { Vec::new() };
        self.push(Tensor::new(&[cout, geom.ho, geom.wo], out), Op::Conv { x, w, b, geom, cols }, needs)
    }

    /// Transposed convolution; `w` is `[cin, cout, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let wdims = self.value(w).dims().to_vec();
        assert_eq!(wdims[0], cin, "conv_transpose2d channel mismatch");
        let cout = wdims[1];
        let geom = conv::conv_transpose_geom(cout, h, wd, wdims[2], stride, pad, out_pad)
            .expect("invalid transposed convolution geometry");
        let out = conv::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cin,
            &geom,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&[cout, geom.h, geom.w], out), Op::ConvT { x, w, b, geom }, needs)
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}x{w}");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * hp * wp];
        for ch in 0..c {
            for y in 0..hp {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..wp {
                    let sx = reflect(xx as isize - pad as isize, w);
                    out[(ch * hp + y) * wp + xx] = src[(ch * h + sy) * w + sx];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(&[c, hp, wp], out), Op::ReflectPad { x, pad }, needs)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(&[c, 2 * h, 2 * w], out), Op::Upsample2 { x }, needs)
    }

    /// Per-channel normalization over the spatial extent, without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let plane = h * w;
        let n = T::lit(plane as f64);
        let eps = T::lit(INSTANCE_NORM_EPS);
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); c * plane];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let s = &src[ch * plane..(ch + 1) * plane];
            let mean = s.iter().copied().sum::<T>() / n;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for (o, &v) in xhat[ch * plane..(ch + 1) * plane].iter_mut().zip(s) {
                *o = (v - mean) * is;
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(&[c, h, w], xhat.clone());
        self.push(value, Op::InstanceNorm { x, xhat, inv_std }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a < T::zero() { T::zero() } else { a });
        let needs = self.needs(x);
        self.push(v, Op::Relu { x }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * slope });
        let needs = self.needs(x);
        self.push(v, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        let needs = self.needs(x);
        self.push(v, Op::Tanh { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add { a, b }, needs)
    }

    /// Channel concatenation of two `[C, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).chw();
        let (cb, hb, wb) = self.value(b).chw();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[ca + cb, h, w], data), Op::Concat { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::lit(k);
        let v = self.value(x).map(|a| a * k);
        let needs = self.needs(x);
        self.push(v, Op::Scale { x, k }, needs)
    }

    /// Weighted sum of single-element tensors.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Var {
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, k)| (v, T::lit(k))).collect();
        let mut total = T::zero();
        for &(v, k) in &terms {
            total += self.value(v).item() * k;
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(total), Op::Linear { terms }, needs)
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).dims(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let acc = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, geom, cols } => {
                    let cout = self.value(*w).dims()[0];
                    if self.needs(*x) {
                        let dx = conv::conv2d_backward_input(self.value(*w).data(), g.data(), cout, geom);
                        acc(*x, Tensor::new(self.value(*x).dims(), dx), &mut grads);
                    }
                    if self.needs(*w) {
                        let dw = conv::conv2d_backward_weight(self.value(*x).data(), cols, g.data(), cout, geom);
                        acc(*w, Tensor::new(self.value(*w).dims(), dw), &mut grads);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        acc(b, Tensor::new(&[cout], conv::bias_grad(g.data(), cout)), &mut grads);
                    }
                }
                Op::ConvT { x, w, b, geom } => {
                    let cin = self.value(*w).dims()[0];
                    let cout = geom.cin;
                    let gcols = conv::im2col(g.data(), geom);
                    let n = geom.cols();
                    if self.needs(*x) {
                        let dx = gemm_new(cin, geom.rows(), n, self.value(*w).data(), false, &gcols, false);
                        acc(*x, Tensor::new(self.value(*x).dims(), dx), &mut grads);
                    }
                    if self.needs(*w) {
                        let dw = gemm_new(cin, n, geom.rows(), self.value(*x).data(), false, &gcols, true);
                        acc(*w, Tensor::new(self.value(*w).dims(), dw), &mut grads);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        acc(b, Tensor::new(&[cout], conv::bias_grad(g.data(), cout)), &mut grads);
                    }
                }
                Op::ReflectPad { x, pad } => {
                    let (c, h, w) = self.value(*x).chw();
                    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                    let mut dx = vec![T::zero(); c * h * w];
                    let gd = g.data();
                    for ch in 0..c {
                        for y in 0..hp {
                            let sy = reflect(y as isize - *pad as isize, h);
                            for xx in 0..wp {
                                let sx = reflect(xx as isize - *pad as isize, w);
                                dx[(ch * h + sy) * w + sx] += gd[(ch * hp + y) * wp + xx];
                            }
                        }
                    }
                    acc(*x, Tensor::new(&[c, h, w], dx), &mut grads);
                }
                Op::Upsample2 { x } => {
                    let (c, h, w) = self.value(*x).chw();
                    let mut dx = vec![T::zero(); c * h * w];
                    let gd = g.data();
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(ch * h + y / 2) * w + xx / 2] += gd[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    acc(*x, Tensor::new(&[c, h, w], dx), &mut grads);
                }
                Op::InstanceNorm { x, xhat, inv_std } => {
                    let (c, h, w) = self.value(*x).chw();
                    let plane = h * w;
                    let n = T::lit(plane as f64);
                    let gd = g.data();
                    let mut dx = vec![T::zero(); c * plane];
                    for (ch, &istd) in inv_std.iter().enumerate().take(c) {
                        let r = ch * plane..(ch + 1) * plane;
                        let (gy, xh) = (&gd[r.clone()], &xhat[r.clone()]);
                        let mean_g = gy.iter().copied().sum::<T>() / n;
                        let mean_gx = gy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &gv), &xv) in dx[r].iter_mut().zip(gy).zip(xh) {
                            *o = istd * (gv - mean_g - xv * mean_gx);
                        }
                    }
                    acc(*x, Tensor::new(&[c, h, w], dx), &mut grads);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let dx: Vec<T> =
                        g.data().iter().zip(xv).map(|(&gv, &a)| if a > T::zero() { gv } else { T::zero() }).collect();
                    acc(*x, Tensor::new(self.value(*x).dims(), dx), &mut grads);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x).data();
                    let dx: Vec<T> =
                        g.data().iter().zip(xv).map(|(&gv, &a)| if a > T::zero() { gv } else { gv * *slope }).collect();
                    acc(*x, Tensor::new(self.value(*x).dims(), dx), &mut grads);
                }
                Op::Tanh { x } => {
                    let yv = node.value.data();
                    let dx: Vec<T> = g.data().iter().zip(yv).map(|(&gv, &y)| gv * (T::one() - y * y)).collect();
                    acc(*x, Tensor::new(self.value(*x).dims(), dx), &mut grads);
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        acc(*a, g.clone(), &mut grads);
                    }
                    if self.needs(*b) {
                        acc(*b, g, &mut grads);
                    }
                }
                Op::Concat { a, b } => {
                    let na = self.value(*a).len();
                    let data = g.into_data();
                    if self.needs(*a) {
                        acc(*a, Tensor::new(self.value(*a).dims(), data[..na].to_vec()), &mut grads);
                    }
                    if self.needs(*b) {
                        acc(*b, Tensor::new(self.value(*b).dims(), data[na..].to_vec()), &mut grads);
                    }
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    acc(*x, g.map(|v| v * k), &mut grads);
                }
                Op::Linear { terms } => {
                    let gv = g.item();
                    for &(v, k) in terms {
                        if self.needs(v) {
                            let dims = self.value(v).dims().to_vec();
                            acc(v, Tensor::new(&dims, vec![gv * k]), &mut grads);
                        }
                    }
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                    let gs = op.backward(&ins, &node.value, &g, &needs);
                    debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", op.name());
                    for ((&v, gi), &nd) in inputs.iter().zip(gs).zip(&needs) {
                        if let (Some(gi), true) = (gi, nd) {
                            acc(v, gi, &mut grads);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Gradients of leaves after [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(dims: &[usize], f: f64) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        Tensor::new(dims, (0..n).map(|i| ((i as f64 + 1.0) * f).sin()).collect())
    }

    /// Sum of elementwise product with a fixed probe, so every output element matters.
    fn probe_loss(g: &mut Graph<f64>, y: Var) -> Var {
        let dims = g.value(y).dims().to_vec();
        let probe = seq(&dims, 0.917);
        let value: f64 = g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        g.custom(&[y], Tensor::scalar(value), Box::new(Probe(probe)))
    }

    struct Probe(Tensor<f64>);
    impl CustomOp<f64> for Probe {
        fn name(&self) -> &'static str {
            "probe"
        }
        fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, grad: &Tensor<f64>, _: &[bool]) -> Vec<Option<Tensor<f64>>> {
            let k = grad.item();
            vec![Some(self.0.map(|v| v * k))]
        }
    }

    /// Central-difference check of every input coordinate of `build`.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let y = build(&mut g, &vars);
            let l = probe_loss(&mut g, y);
            (g.value(l).item(), g, vars, l)
        };
        let (_, g, vars, l) = eval(&inputs);
        let grads = g.backward(l);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("gradient present");
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = analytic.data()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} coord {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        check(vec![seq(&[2, 6, 5], 0.3), seq(&[3, 2, 3, 3], 0.7), seq(&[3], 0.5)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        });
        check(vec![seq(&[2, 6, 6], 0.3), seq(&[3, 2, 4, 4], 0.7)], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    }

    #[test]
    fn conv_transpose_gradients() {
        check(vec![seq(&[2, 3, 4], 0.3), seq(&[2, 3, 3, 3], 0.7), seq(&[3], 0.2)], |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1)
        });
    }

    #[test]
    fn pad_upsample_concat_gradients() {
        check(vec![seq(&[2, 4, 5], 0.3)], |g, v| g.reflect_pad(v[0], 2));
        check(vec![seq(&[2, 3, 3], 0.3)], |g, v| g.upsample2(v[0]));
        check(vec![seq(&[2, 3, 3], 0.3), seq(&[1, 3, 3], 0.8)], |g, v| g.concat(v[0], v[1]));
    }

    #[test]
    fn pointwise_gradients() {
        check(vec![seq(&[2, 4, 4], 0.37)], |g, v| g.tanh(v[0]));
        check(vec![seq(&[2, 4, 4], 0.37)], |g, v| g.leaky_relu(v[0], 0.2));
        check(vec![seq(&[2, 4, 4], 0.37)], |g, v| g.relu(v[0]));
        check(vec![seq(&[2, 4, 4], 0.37), seq(&[2, 4, 4], 0.1)], |g, v| g.add(v[0], v[1]));
        check(vec![seq(&[2, 4, 4], 0.37)], |g, v| g.scale(v[0], -1.7));
    }

    #[test]
    fn instance_norm_gradients() {
        check(vec![seq(&[3, 4, 5], 0.41)], |g, v| g.instance_norm(v[0]));
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut g = Graph::new();
        let x = g.constant(seq(&[2, 8, 8], 0.3));
        let y = g.instance_norm(x);
        for ch in g.value(y).data().chunks(64) {
            let mean: f64 = ch.iter().sum::<f64>() / 64.0;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-3, 4), 3);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(seq(&[1, 2, 2], 0.3));
        let b = g.constant(seq(&[1, 2, 2], 0.5));
        let s = g.add(a, b);
        let l = probe_loss(&mut g, s);
        let grads = g.backward(l);
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }
}
