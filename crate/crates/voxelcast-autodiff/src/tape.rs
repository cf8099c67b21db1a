//! Reverse-mode differentiation on a append-only operation list.
//!
//! Every operation pushes a node holding its output values and the indices of
//! its inputs; creation order is already a topological order, so the reverse
//! pass walks the list backwards once, accumulating gradients into parents.
//! One tape instance is single-threaded; independent tapes may run in
//! parallel.

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;
use crate::{conv, AutodiffError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Conv3d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Dense { x: usize, w: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Sum { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Tile { x: usize, h: usize, w: usize },
    UpsampleNearest2 { x: usize },
    AvgPool2 { x: usize },
    ReshapeProjection { x: usize },
    BatchNormTrain { x: usize, gamma: usize, beta: usize },
    BatchNormEval { x: usize, gamma: usize, beta: usize },
    L1Loss { a: usize, b: usize },
    L2Loss { a: usize, b: usize },
}

struct Node<S: Scalar> {
    values: ArrayD<S>,
    op: Op,
    needs_grad: bool,
    /// Forward-pass byproducts the backward pass reuses (batch-norm saves
    /// per-channel mean and inverse standard deviation).
    aux: Vec<ArrayD<S>>,
}

/// Batch statistics a training-mode batch normalization observed; callers
/// fold these into their running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<S: Scalar> {
    pub mean: ArrayD<S>,
    pub var: ArrayD<S>,
}

/// Flat row-major slice of a tensor; every tensor the engine creates is in
/// standard layout.
fn flat<S: Scalar>(a: &ArrayD<S>) -> &[S] {
    a.as_slice().expect("engine tensors are in standard layout")
}

fn flat_mut<S: Scalar>(a: &mut ArrayD<S>) -> &mut [S] {
    a.as_slice_mut().expect("engine tensors are in standard layout")
}

/// Append-only reverse-mode differentiation list.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, values: ArrayD<S>, op: Op, needs_grad: bool, aux: Vec<ArrayD<S>>) -> Var {
        // Every node is kept in standard layout so the kernels can work on
        // flat slices.
        let values = if values.as_slice().is_some() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { values, op, needs_grad, aux });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor that participates in differentiation (parameters and
    /// gradient-checked inputs).
    pub fn param(&mut self, values: ArrayD<S>) -> Var {
        self.push(values, Op::Leaf, true, Vec::new())
    }

    /// Insert a constant tensor; no gradient is computed for it.
    pub fn constant(&mut self, values: ArrayD<S>) -> Var {
        self.push(values, Op::Leaf, false, Vec::new())
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].values.shape()
    }

    /// Gradient accumulated by the latest [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads[v.0].as_ref()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---- operations ------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let out = conv::conv2d_forward(
            &self.value(x).view(),
            &self.value(w).view(),
            bias.map(|b| self.value(b).view()).as_ref(),
            stride,
            pad,
        )?;
        let mut ids = vec![x.0, w.0];
        if let Some(b) = bias {
            ids.push(b.0);
        }
        let ng = self.needs(&ids);
        Ok(self.push(out, Op::Conv2d { x: x.0, w: w.0, b: bias.map(|b| b.0), stride, pad }, ng, Vec::new()))
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let out = conv::conv3d_forward(
            &self.value(x).view(),
            &self.value(w).view(),
            bias.map(|b| self.value(b).view()).as_ref(),
            stride,
            pad,
        )?;
        let mut ids = vec![x.0, w.0];
        if let Some(b) = bias {
            ids.push(b.0);
        }
        let ng = self.needs(&ids);
        Ok(self.push(out, Op::Conv3d { x: x.0, w: w.0, b: bias.map(|b| b.0), stride, pad }, ng, Vec::new()))
    }

    /// Fully connected layer: `x [n, in] · w [out, in]ᵀ + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(AutodiffError::Shape(format!(
                "dense shapes incompatible: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let x2 = self.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let w2 = self.value(w).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let mut out = x2.dot(&w2.t());
        for mut row in out.rows_mut() {
            for (o, bv) in row.iter_mut().zip(self.value(b).iter()) {
                *o += *bv;
            }
        }
        let ng = self.needs(&[x.0, w.0, b.0]);
        Ok(self.push(out.into_dyn(), Op::Dense { x: x.0, w: w.0, b: b.0 }, ng, Vec::new()))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max_val(S::ZERO));
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Relu { x: x.0 }, ng, Vec::new())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| S::ONE / (S::ONE + (-v).exp()));
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Sigmoid { x: x.0 }, ng, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a) + self.value(b);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, ng, Vec::new()))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a) * self.value(b);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, ng, Vec::new()))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = S::from_f64(c);
        let out = self.value(x).mapv(|v| v * k);
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Scale { x: x.0, c }, ng, Vec::new())
    }

    /// Sum of all elements, as a 0-dimensional tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: S = self.value(x).iter().copied().sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Sum { x: x.0 }, ng, Vec::new())
    }

    /// Concatenation along `axis`; all other axis lengths must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Shape("concat of zero tensors".into()));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if axis >= s0.len() {
            return Err(AutodiffError::Shape(format!(
                "concat: axis {axis} out of range for shape {s0:?}"
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            let sp = self.shape(*p);
            if sp.len() != s0.len()
                || sp[..axis] != s0[..axis]
                || sp[axis + 1..] != s0[axis + 1..]
            {
                return Err(AutodiffError::Shape(format!(
                    "concat: incompatible shapes {s0:?} vs {sp:?} along axis {axis}"
                )));
            }
            axis_total += sp[axis];
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = axis_total;
        let outer: usize = s0[..axis].iter().product();
        let tail: usize = s0[axis + 1..].iter().product();
        let inner_total = axis_total * tail;
        let mut data = vec![S::ZERO; outer * inner_total];
        let mut offset = 0;
        for p in parts {
            let inner_p = self.shape(*p)[axis] * tail;
            let pf = flat(self.value(*p));
            for o in 0..outer {
                data[o * inner_total + offset..o * inner_total + offset + inner_p]
                    .copy_from_slice(&pf[o * inner_p..(o + 1) * inner_p]);
            }
            offset += inner_p;
        }
        let out = ArrayD::from_shape_vec(IxDyn(&out_shape), data)
            .expect("concat buffer matches the combined shape");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        Ok(self.push(out, Op::Concat { parts: ids, axis }, ng, Vec::new()))
    }

    /// Broadcast feature vectors `[n, f]` to feature maps `[n, f, h, w]`.
    pub fn tile(&mut self, x: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(AutodiffError::Shape(format!("tile expects [n, f], got {xs:?}")));
        }
        let (n, f) = (xs[0], xs[1]);
        let hw = h * w;
        if hw == 0 {
            return Err(AutodiffError::Shape("tile target area must be nonzero".into()));
        }
        let xf = flat(self.value(x));
        let mut data = vec![S::ZERO; n * f * hw];
        for (bi, chunk) in data.chunks_exact_mut(hw).enumerate() {
            chunk.fill(xf[bi]);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, f, h, w]), data)
            .expect("tile buffer matches [n, f, h, w]");
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::Tile { x: x.0, h, w }, ng, Vec::new()))
    }

    /// Nearest-neighbor ×2 spatial upsampling of `[n, c, h, w]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(AutodiffError::Shape(format!("upsample expects [n, c, h, w], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let w2 = 2 * w;
        let xf = flat(self.value(x));
        let mut data = vec![S::ZERO; n * c * 4 * h * w];
        for b in 0..n * c {
            let src_base = b * h * w;
            let dst_base = b * 2 * h * w2;
            for i in 0..h {
                let src = &xf[src_base + i * w..src_base + (i + 1) * w];
                let r0 = dst_base + 2 * i * w2;
                let row = &mut data[r0..r0 + w2];
                for (j, &v) in src.iter().enumerate() {
                    row[2 * j] = v;
                    row[2 * j + 1] = v;
                }
                data.copy_within(r0..r0 + w2, r0 + w2);
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, 2 * h, 2 * w]), data)
            .expect("upsample buffer matches [n, c, 2h, 2w]");
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::UpsampleNearest2 { x: x.0 }, ng, Vec::new()))
    }

    /// 2×2, stride-2 average pooling of `[n, c, h, w]` (even dims required).
    pub fn avgpool2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(AutodiffError::Shape(format!(
                "avgpool2 expects [n, c, even, even], got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2] / 2, xs[3] / 2);
        let win = xs[3];
        let quarter = S::from_f64(0.25);
        let xf = flat(self.value(x));
        let mut data = vec![S::ZERO; n * c * h * w];
        for b in 0..n * c {
            let src_base = b * 2 * h * win;
            let dst_base = b * h * w;
            for i in 0..h {
                let top = &xf[src_base + 2 * i * win..src_base + (2 * i + 1) * win];
                let bot = &xf[src_base + (2 * i + 1) * win..src_base + (2 * i + 2) * win];
                let dst = &mut data[dst_base + i * w..dst_base + (i + 1) * w];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = (top[2 * j] + top[2 * j + 1] + bot[2 * j] + bot[2 * j + 1]) * quarter;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), data)
            .expect("pool buffer matches [n, c, h/2, w/2]");
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::AvgPool2 { x: x.0 }, ng, Vec::new()))
    }

    /// Collapse the depth axis of `[n, c, d, h, w]` into channels, producing
    /// `[n, d·c, h, w]` with output channel index `d_index · c_count + c`.
    pub fn reshape_projection(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(AutodiffError::Shape(format!(
                "reshape projection expects [n, c, d, h, w], got {xs:?}"
            )));
        }
        let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let hw = h * w;
        let xf = flat(self.value(x));
        let mut data = vec![S::ZERO; n * c * d * hw];
        for s in 0..n {
            for ch in 0..c {
                for z in 0..d {
                    let src = ((s * c + ch) * d + z) * hw;
                    let dst = (s * d * c + z * c + ch) * hw;
                    data[dst..dst + hw].copy_from_slice(&xf[src..src + hw]);
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, d * c, h, w]), data)
            .expect("projection buffer matches [n, d*c, h, w]");
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::ReshapeProjection { x: x.0 }, ng, Vec::new()))
    }

    /// Batch normalization over every axis except channel axis 1, using batch
    /// statistics. Returns the normalized tensor and the statistics so the
    /// caller can update running averages.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<S>), AutodiffError> {
        let (mean, var) = self.check_bn_shapes(x, gamma, beta)?;
        let out = self.bn_normalize(x, gamma, beta, &mean, &var);
        let eps = S::from_f64(BN_EPS);
        let inv_std = var.mapv(|v| S::ONE / (v + eps).sqrt());
        let ng = self.needs(&[x.0, gamma.0, beta.0]);
        let v = self.push(
            out,
            Op::BatchNormTrain { x: x.0, gamma: gamma.0, beta: beta.0 },
            ng,
            vec![mean.clone(), inv_std],
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch normalization with externally supplied (running) statistics — a
    /// per-channel affine map.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &ArrayD<S>,
        var: &ArrayD<S>,
    ) -> Result<Var, AutodiffError> {
        let _ = self.check_bn_shapes(x, gamma, beta)?;
        let channels = self.shape(x)[1];
        if mean.len() != channels || var.len() != channels {
            return Err(AutodiffError::Shape("batchnorm running stats length mismatch".into()));
        }
        let out = self.bn_normalize(x, gamma, beta, mean, var);
        let eps = S::from_f64(BN_EPS);
        let inv_std = var.mapv(|v| S::ONE / (v + eps).sqrt());
        let ng = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            Op::BatchNormEval { x: x.0, gamma: gamma.0, beta: beta.0 },
            ng,
            vec![mean.clone(), inv_std],
        ))
    }

    fn check_bn_shapes(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(ArrayD<S>, ArrayD<S>), AutodiffError> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(AutodiffError::Shape(format!(
                "batchnorm expects a channel axis at position 1, got {xs:?}"
            )));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(AutodiffError::Shape(
                "batchnorm scale/shift must be one value per channel".into(),
            ));
        }
        // Per-channel mean and (population) variance over all other axes.
        let len = self.value(x).len();
        if len == 0 {
            return Err(AutodiffError::Shape("batchnorm input must be nonempty".into()));
        }
        let m = (len / c) as f64;
        let inv_m = S::from_f64(1.0 / m);
        let sp: usize = xs[2..].iter().product();
        let xf = flat(self.value(x));
        let mut mean = vec![S::ZERO; c];
        for (bi, chunk) in xf.chunks_exact(sp).enumerate() {
            let mut acc = S::ZERO;
            for &v in chunk {
                acc += v;
            }
            mean[bi % c] += acc;
        }
        for v in &mut mean {
            *v *= inv_m;
        }
        let mut var = vec![S::ZERO; c];
        for (bi, chunk) in xf.chunks_exact(sp).enumerate() {
            let mc = mean[bi % c];
            let mut acc = S::ZERO;
            for &v in chunk {
                let d = v - mc;
                acc += d * d;
            }
            var[bi % c] += acc;
        }
        for v in &mut var {
            *v *= inv_m;
        }
        let mean = ArrayD::from_shape_vec(IxDyn(&[c]), mean).expect("per-channel vector");
        let var = ArrayD::from_shape_vec(IxDyn(&[c]), var).expect("per-channel vector");
        Ok((mean, var))
    }

    fn bn_normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &ArrayD<S>,
        var: &ArrayD<S>,
    ) -> ArrayD<S> {
        let eps = S::from_f64(BN_EPS);
        let mut out = self.value(x).clone();
        let c = self.value(gamma).len();
        let sp: usize = self.shape(x)[2..].iter().product();
        let inv_std = var.mapv(|v| S::ONE / (v + eps).sqrt());
        let gf = flat(self.value(gamma));
        let bf = flat(self.value(beta));
        let mf = flat(mean);
        let isf = flat(&inv_std);
        for (bi, chunk) in flat_mut(&mut out).chunks_exact_mut(sp).enumerate() {
            let ch = bi % c;
            let (m, is, gc, bc) = (mf[ch], isf[ch], gf[ch], bf[ch]);
            for v in chunk {
                *v = (*v - m) * is * gc + bc;
            }
        }
        out
    }

    /// Mean absolute difference, as a 0-dimensional tensor.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape(format!(
                "l1 loss shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = S::from_f64(self.value(a).len() as f64);
        let total: S = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total / n);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::L1Loss { a: a.0, b: b.0 }, ng, Vec::new()))
    }

    /// Root-mean-square difference (the Euclidean distance normalized by
    /// √element-count), as a 0-dimensional tensor. Gradient is defined as 0
    /// at exactly identical inputs.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape(format!(
                "l2 loss shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = S::from_f64(self.value(a).len() as f64);
        let total: S = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[]), (total / n).sqrt());
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::L2Loss { a: a.0, b: b.0 }, ng, Vec::new()))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Propagate gradients from scalar `root` back to every parameter node.
    pub fn backward(&mut self, root: Var) -> Result<(), AutodiffError> {
        if self.value(root).len() != 1 {
            return Err(AutodiffError::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].values.raw_dim(), S::ONE));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn accumulate(&mut self, id: usize, delta: ArrayD<S>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, id: usize, g: &ArrayD<S>) -> Result<(), AutodiffError> {
        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    &self.nodes[x].values.view(),
                    &self.nodes[w].values.view(),
                    &g.view(),
                    stride,
                    pad,
                    self.wants(x),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw);
                if let Some(b) = b {
                    self.accumulate(b, db);
                }
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv3d_backward(
                    &self.nodes[x].values.view(),
                    &self.nodes[w].values.view(),
                    &g.view(),
                    stride,
                    pad,
                    self.wants(x),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw);
                if let Some(b) = b {
                    self.accumulate(b, db);
                }
            }
            Op::Dense { x, w, b } => {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                let x2 = self.nodes[x].values.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                let w2 = self.nodes[w].values.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
                if self.wants(x) {
                    self.accumulate(x, g2.dot(&w2).into_dyn());
                }
                if self.wants(w) {
                    self.accumulate(w, g2.t().dot(&x2).into_dyn());
                }
                if self.wants(b) {
                    self.accumulate(b, g2.sum_axis(ndarray::Axis(0)).into_dyn());
                }
            }
            Op::Relu { x } => {
                let dx = ndarray::Zip::from(&self.nodes[x].values)
                    .and(g)
                    .map_collect(|&v, &gv| if v > S::ZERO { gv } else { S::ZERO });
                self.accumulate(x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = ndarray::Zip::from(&self.nodes[id].values)
                    .and(g)
                    .map_collect(|&y, &gv| gv * y * (S::ONE - y));
                self.accumulate(x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    let da = g * &self.nodes[b].values;
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let db = g * &self.nodes[a].values;
                    self.accumulate(b, db);
                }
            }
            Op::Scale { x, c } => {
                let k = S::from_f64(c);
                self.accumulate(x, g.mapv(|v| v * k));
            }
            Op::Sum { x } => {
                let gv = *g.first().unwrap();
                self.accumulate(x, ArrayD::from_elem(self.nodes[x].values.raw_dim(), gv));
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].values.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let tail: usize = out_shape[axis + 1..].iter().product();
                let inner_total = out_shape[axis] * tail;
                let gf = flat(g);
                let mut offset = 0;
                for p in parts {
                    let pshape = self.nodes[p].values.shape().to_vec();
                    let inner_p = pshape[axis] * tail;
                    let mut data = vec![S::ZERO; outer * inner_p];
                    for o in 0..outer {
                        data[o * inner_p..(o + 1) * inner_p].copy_from_slice(
                            &gf[o * inner_total + offset..o * inner_total + offset + inner_p],
                        );
                    }
                    offset += inner_p;
                    let dp = ArrayD::from_shape_vec(IxDyn(&pshape), data)
                        .expect("concat gradient matches the part shape");
                    self.accumulate(p, dp);
                }
            }
            Op::Tile { x, h, w } => {
                let xs = self.nodes[x].values.shape().to_vec();
                let gf = flat(g);
                let mut data = vec![S::ZERO; xs[0] * xs[1]];
                for (bi, chunk) in gf.chunks_exact(h * w).enumerate() {
                    let mut acc = S::ZERO;
                    for &v in chunk {
                        acc += v;
                    }
                    data[bi] = acc;
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&xs), data)
                    .expect("tile gradient matches [n, f]");
                self.accumulate(x, dx);
            }
            Op::UpsampleNearest2 { x } => {
                let xs = self.nodes[x].values.shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let w2 = 2 * w;
                let gf = flat(g);
                let mut data = vec![S::ZERO; n * c * h * w];
                for b in 0..n * c {
                    let src_base = b * 2 * h * w2;
                    let dst_base = b * h * w;
                    for i in 0..h {
                        let top = &gf[src_base + 2 * i * w2..src_base + (2 * i + 1) * w2];
                        let bot = &gf[src_base + (2 * i + 1) * w2..src_base + (2 * i + 2) * w2];
                        let dst = &mut data[dst_base + i * w..dst_base + (i + 1) * w];
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = top[2 * j] + top[2 * j + 1] + bot[2 * j] + bot[2 * j + 1];
                        }
                    }
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&xs), data)
                    .expect("upsample gradient matches input shape");
                self.accumulate(x, dx);
            }
            Op::AvgPool2 { x } => {
                let xs = self.nodes[x].values.shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2] / 2, xs[3] / 2);
                let win = xs[3];
                let quarter = S::from_f64(0.25);
                let gf = flat(g);
                let mut data = vec![S::ZERO; n * c * xs[2] * win];
                for b in 0..n * c {
                    let src_base = b * h * w;
                    let dst_base = b * 2 * h * win;
                    for i in 0..h {
                        let src = &gf[src_base + i * w..src_base + (i + 1) * w];
                        let r0 = dst_base + 2 * i * win;
                        let row = &mut data[r0..r0 + win];
                        for (j, &v) in src.iter().enumerate() {
                            let gv = v * quarter;
                            row[2 * j] = gv;
                            row[2 * j + 1] = gv;
                        }
                        data.copy_within(r0..r0 + win, r0 + win);
                    }
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&xs), data)
                    .expect("pool gradient matches input shape");
                self.accumulate(x, dx);
            }
            Op::ReshapeProjection { x } => {
                let xs = self.nodes[x].values.shape().to_vec();
                let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
                let hw = h * w;
                let gf = flat(g);
                let mut data = vec![S::ZERO; n * c * d * hw];
                for s in 0..n {
                    for ch in 0..c {
                        for z in 0..d {
                            let dst = ((s * c + ch) * d + z) * hw;
                            let src = (s * d * c + z * c + ch) * hw;
                            data[dst..dst + hw].copy_from_slice(&gf[src..src + hw]);
                        }
                    }
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&xs), data)
                    .expect("projection gradient matches input shape");
                self.accumulate(x, dx);
            }
            Op::BatchNormTrain { x, gamma, beta } => {
                self.bn_train_backward(id, x, gamma, beta, g);
            }
            Op::BatchNormEval { x, gamma, beta } => {
                // Statistics are constants here: d/dx is a per-channel scale.
                let c = self.nodes[gamma].values.len();
                let sp: usize = self.nodes[id].values.shape()[2..].iter().product();
                let gf = flat(g);
                let xf = flat(&self.nodes[x].values);
                let mf = flat(&self.nodes[id].aux[0]);
                let isf = flat(&self.nodes[id].aux[1]);
                let gvf = flat(&self.nodes[gamma].values);
                let dx = self.wants(x).then(|| {
                    let mut dx = g.clone();
                    for (bi, chunk) in flat_mut(&mut dx).chunks_exact_mut(sp).enumerate() {
                        let ch = bi % c;
                        let (gc, ic) = (gvf[ch], isf[ch]);
                        for v in chunk {
                            *v = *v * gc * ic;
                        }
                    }
                    dx
                });
                let dgamma = self.wants(gamma).then(|| {
                    let mut dgamma = vec![S::ZERO; c];
                    for (bi, (gc, xc)) in
                        gf.chunks_exact(sp).zip(xf.chunks_exact(sp)).enumerate()
                    {
                        let ch = bi % c;
                        let (m, is) = (mf[ch], isf[ch]);
                        let mut acc = S::ZERO;
                        for (&gv, &xv) in gc.iter().zip(xc) {
                            acc += gv * ((xv - m) * is);
                        }
                        dgamma[ch] += acc;
                    }
                    ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).expect("per-channel vector")
                });
                let dbeta = self.wants(beta).then(|| {
                    let mut dbeta = vec![S::ZERO; c];
                    for (bi, chunk) in gf.chunks_exact(sp).enumerate() {
                        let mut acc = S::ZERO;
                        for &v in chunk {
                            acc += v;
                        }
                        dbeta[bi % c] += acc;
                    }
                    ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).expect("per-channel vector")
                });
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                if let Some(dgamma) = dgamma {
                    self.accumulate(gamma, dgamma);
                }
                if let Some(dbeta) = dbeta {
                    self.accumulate(beta, dbeta);
                }
            }
            Op::L1Loss { a, b } => {
                let gv = *g.first().unwrap();
                let n = S::from_f64(self.nodes[a].values.len() as f64);
                let unit = gv / n;
                let diff_sign = ndarray::Zip::from(&self.nodes[a].values)
                    .and(&self.nodes[b].values)
                    .map_collect(|&x, &y| {
                        if x > y {
                            unit
                        } else if x < y {
                            -unit
                        } else {
                            S::ZERO
                        }
                    });
                if self.wants(a) {
                    self.accumulate(a, diff_sign.clone());
                }
                if self.wants(b) {
                    self.accumulate(b, diff_sign.mapv(|v| -v));
                }
            }
            Op::L2Loss { a, b } => {
                let gv = *g.first().unwrap();
                let out = *self.nodes[id].values.first().unwrap();
                // d/da sqrt(mean((a-b)^2)) = (a-b) / (n * out); zero at a = b.
                if out > S::ZERO {
                    let n = S::from_f64(self.nodes[a].values.len() as f64);
                    let k = gv / (n * out);
                    let d = ndarray::Zip::from(&self.nodes[a].values)
                        .and(&self.nodes[b].values)
                        .map_collect(|&x, &y| (x - y) * k);
                    if self.wants(a) {
                        self.accumulate(a, d.clone());
                    }
                    if self.wants(b) {
                        self.accumulate(b, d.mapv(|v| -v));
                    }
                }
            }
        }
        Ok(())
    }

    fn bn_train_backward(&mut self, id: usize, x: usize, gamma: usize, beta: usize, g: &ArrayD<S>) {
        let c = self.nodes[id].aux[0].len();
        let m = S::from_f64((self.nodes[x].values.len() / c) as f64);
        let sp: usize = self.nodes[x].values.shape()[2..].iter().product();
        let xf = flat(&self.nodes[x].values);
        let gf = flat(g);
        let mf = flat(&self.nodes[id].aux[0]);
        let isf = flat(&self.nodes[id].aux[1]);
        let gvf = flat(&self.nodes[gamma].values);

        // Per-channel reductions: sum of upstream gradient and of grad·x̂.
        let mut sum_g = vec![S::ZERO; c];
        let mut sum_gx = vec![S::ZERO; c];
        for (bi, (gc, xc)) in gf.chunks_exact(sp).zip(xf.chunks_exact(sp)).enumerate() {
            let ch = bi % c;
            let (mch, isch) = (mf[ch], isf[ch]);
            let (mut ag, mut agx) = (S::ZERO, S::ZERO);
            for (&gv, &xv) in gc.iter().zip(xc) {
                let xhat = (xv - mch) * isch;
                ag += gv;
                agx += gv * xhat;
            }
            sum_g[ch] += ag;
            sum_gx[ch] += agx;
        }
        // dx = γ·inv_std/m · (m·g − Σg − x̂·Σ(g·x̂))
        let dx = self.wants(x).then(|| {
            let mut data = vec![S::ZERO; xf.len()];
            for (bi, (dc, (gc, xc))) in data
                .chunks_exact_mut(sp)
                .zip(gf.chunks_exact(sp).zip(xf.chunks_exact(sp)))
                .enumerate()
            {
                let ch = bi % c;
                let (mch, isch) = (mf[ch], isf[ch]);
                let k = gvf[ch] * isch / m;
                let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                for ((dv, &gv), &xv) in dc.iter_mut().zip(gc).zip(xc) {
                    let xhat = (xv - mch) * isch;
                    *dv = k * (m * gv - sg - xhat * sgx);
                }
            }
            ArrayD::from_shape_vec(self.nodes[x].values.raw_dim(), data)
                .expect("gradient matches input shape")
        });
        if self.wants(beta) {
            let dbeta = ArrayD::from_shape_vec(IxDyn(&[c]), sum_g.clone()).unwrap();
            self.accumulate(beta, dbeta);
        }
        if self.wants(gamma) {
            let dgamma = ArrayD::from_shape_vec(IxDyn(&[c]), sum_gx.clone()).unwrap();
            self.accumulate(gamma, dgamma);
        }
        if let Some(dx) = dx {
            self.accumulate(x, dx);
        }
    }
}

/// Stabilizer added to variances before the square root.
pub const BN_EPS: f64 = 1e-5;
