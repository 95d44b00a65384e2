//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Values live in the tape as eagerly evaluated nodes; ops record the input
//! ids they need for the backward sweep. Backward walks nodes in reverse
//! creation order, which is a valid topological order because an op can only
//! reference earlier ids. Leaf gradients accumulate across repeated backward
//! calls; internal adjoints are rebuilt per call.

use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    AddScalar(ValueId),
    MulScalar(ValueId, f32),
    Matmul {
        a: ValueId,
        b: ValueId,
        m: usize,
        k: usize,
        n: usize,
    },
    BiasAdd {
        x: ValueId,
        bias: ValueId,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: ValueId,
        w: ValueId,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        x: ValueId,
        argmax: Vec<u32>,
    },
    Upsample2x(ValueId),
    Relu(ValueId),
    Sigmoid(ValueId),
    Reshape(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    CrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        reduction: Reduction,
        probs: Vec<f32>,
        per_sample: Vec<f32>,
    },
    DiffusionPenalty {
        x: ValueId,
        grid_h: usize,
        grid_w: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
}

/// Append-only autodiff tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: Op) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn node(&self, id: ValueId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Register a tensor as a leaf; gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Register a constant leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<ValueId, NumericsError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NumericsError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: ValueId) -> &[f32] {
        &self.node(id).data
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor {
        Tensor::from_vec(&self.node(id).shape, self.node(id).data.clone())
            .expect("tape node shape/data consistent")
    }

    /// Accumulated gradient of a leaf (present after backward when the leaf
    /// requires grad).
    pub fn grad(&self, id: ValueId) -> Option<&[f32]> {
        self.node(id).grad.as_deref()
    }

    /// Per-sample losses recorded by a cross-entropy node.
    pub fn cross_entropy_per_sample(&self, id: ValueId) -> Option<&[f32]> {
        match &self.node(id).op {
            Op::CrossEntropy { per_sample, .. } => Some(per_sample),
            _ => None,
        }
    }

    fn same_shape(&self, a: ValueId, b: ValueId) -> Result<(), NumericsError> {
        if self.node(a).shape != self.node(b).shape {
            return Err(NumericsError::ShapeMismatch {
                expected: self.node(a).shape.clone(),
                got: self.node(b).shape.clone(),
                context: "elementwise op".into(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.same_shape(a, b)?;
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.node(a).shape.clone(), data, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.same_shape(a, b)?;
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.node(a).shape.clone(), data, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.same_shape(a, b)?;
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.node(a).shape.clone(), data, needs, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f32) -> ValueId {
        let data = self.node(a).data.iter().map(|x| x + c).collect();
        self.push(
            self.node(a).shape.clone(),
            data,
            self.needs(a),
            Op::AddScalar(a),
        )
    }

    pub fn mul_scalar(&mut self, a: ValueId, c: f32) -> ValueId {
        let data = self.node(a).data.iter().map(|x| x * c).collect();
        self.push(
            self.node(a).shape.clone(),
            data,
            self.needs(a),
            Op::MulScalar(a, c),
        )
    }

    /// Matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                expected: sa.clone(),
                got: sb.clone(),
                context: "matmul".into(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        {
            let ad = &self.node(a).data;
            let bd = &self.node(b).data;
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[kk * n..(kk + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, needs, Op::Matmul { a, b, m, k, n }))
    }

    /// Broadcast-add a bias vector along `axis` of `x`.
    pub fn bias_add(
        &mut self,
        x: ValueId,
        bias: ValueId,
        axis: usize,
    ) -> Result<ValueId, NumericsError> {
        let sx = self.node(x).shape.clone();
        let sb = &self.node(bias).shape;
        if axis >= sx.len() || sb.len() != 1 || sb[0] != sx[axis] {
            return Err(NumericsError::ShapeMismatch {
                expected: sx.clone(),
                got: sb.clone(),
                context: format!("bias_add axis {axis}"),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let mid = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let mut data = self.node(x).data.clone();
        {
            let bd = &self.node(bias).data;
            for o in 0..outer {
                for c in 0..mid {
                    let base = (o * mid + c) * inner;
                    let bv = bd[c];
                    for v in &mut data[base..base + inner] {
                        *v += bv;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            sx,
            data,
            needs,
            Op::BiasAdd {
                x,
                bias,
                outer,
                mid,
                inner,
            },
        ))
    }

    /// 2D convolution: x `[B, Cin, H, W]`, w `[Cout, Cin, KH, KW]`.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId, NumericsError> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(NumericsError::ShapeMismatch {
                expected: sx,
                got: sw,
                context: "conv2d".into(),
            });
        }
        let (bsz, cin, h, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = conv_output(h, width, kh, kw, stride, padding).ok_or_else(|| {
            NumericsError::ShapeMismatch {
                expected: sw.clone(),
                got: sx.clone(),
                context: "conv2d kernel larger than padded input".into(),
            }
        })?;
        let mut out = vec![0.0f32; bsz * cout * oh * ow];
        conv2d_forward(
            &self.node(x).data,
            &self.node(w).data,
            &mut out,
            ConvDims {
                bsz,
                cin,
                h,
                w: width,
                cout,
                kh,
                kw,
                oh,
                ow,
                stride,
                padding,
            },
        );
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            vec![bsz, cout, oh, ow],
            out,
            needs,
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
        ))
    }

    /// Transposed 2D convolution: x `[B, Cin, H, W]`, w `[Cin, Cout, KH, KW]`.
    pub fn conv_transpose2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId, NumericsError> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(NumericsError::ShapeMismatch {
                expected: sx,
                got: sw,
                context: "conv_transpose2d".into(),
            });
        }
        let (bsz, cin, h, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = (h - 1) * stride + kh;
        let ow = (width - 1) * stride + kw;
        if oh < 2 * padding || ow < 2 * padding {
            return Err(NumericsError::ShapeMismatch {
                expected: sw,
                got: sx,
                context: "conv_transpose2d padding exceeds output".into(),
            });
        }
        let (oh, ow) = (oh - 2 * padding, ow - 2 * padding);
        let mut out = vec![0.0f32; bsz * cout * oh * ow];
        convt2d_forward(
            &self.node(x).data,
            &self.node(w).data,
            &mut out,
            ConvDims {
                bsz,
                cin,
                h,
                w: width,
                cout,
                kh,
                kw,
                oh,
                ow,
                stride,
                padding,
            },
        );
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            vec![bsz, cout, oh, ow],
            out,
            needs,
            Op::ConvTranspose2d {
                x,
                w,
                stride,
                padding,
            },
        ))
    }

    /// Non-overlapping max pooling with window `size` (stride = size).
    pub fn max_pool2d(&mut self, x: ValueId, size: usize) -> Result<ValueId, NumericsError> {
        let sx = self.node(x).shape.clone();
        if sx.len() != 4 || sx[2] < size || sx[3] < size {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![0, 0, size, size],
                got: sx,
                context: "max_pool2d".into(),
            });
        }
        let (bsz, ch, h, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / size, width / size);
        let mut out = vec![0.0f32; bsz * ch * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        {
            let xd = &self.node(x).data;
            for bc in 0..bsz * ch {
                let xb = bc * h * width;
                let ob = bc * oh * ow;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for di in 0..size {
                            let row = xb + (oi * size + di) * width + oj * size;
                            for dj in 0..size {
                                let v = xd[row + dj];
                                if v > best {
                                    best = v;
                                    best_idx = row + dj;
                                }
                            }
                        }
                        out[ob + oi * ow + oj] = best;
                        argmax[ob + oi * ow + oj] = best_idx as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![bsz, ch, oh, ow],
            out,
            needs,
            Op::MaxPool2d { x, argmax },
        ))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2x(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let sx = self.node(x).shape.clone();
        if sx.len() != 4 {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![0, 0, 0, 0],
                got: sx,
                context: "upsample2x".into(),
            });
        }
        let (bsz, ch, h, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h * 2, width * 2);
        let mut out = vec![0.0f32; bsz * ch * oh * ow];
        {
            let xd = &self.node(x).data;
            for bc in 0..bsz * ch {
                let xb = bc * h * width;
                let ob = bc * oh * ow;
                for i in 0..h {
                    for j in 0..width {
                        let v = xd[xb + i * width + j];
                        let r0 = ob + 2 * i * ow + 2 * j;
                        out[r0] = v;
                        out[r0 + 1] = v;
                        out[r0 + ow] = v;
                        out[r0 + ow + 1] = v;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![bsz, ch, oh, ow], out, needs, Op::Upsample2x(x)))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let data = self.node(x).data.iter().map(|v| v.max(0.0)).collect();
        self.push(self.node(x).shape.clone(), data, self.needs(x), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let data = self
            .node(x)
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(
            self.node(x).shape.clone(),
            data,
            self.needs(x),
            Op::Sigmoid(x),
        )
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId, NumericsError> {
        let expected = self.node(x).data.len();
        let got: usize = shape.iter().product();
        if expected != got {
            return Err(NumericsError::DataLength { expected, got });
        }
        let data = self.node(x).data.clone();
        Ok(self.push(shape.to_vec(), data, self.needs(x), Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let total: f32 = self.node(x).data.iter().sum();
        self.push(Vec::new(), vec![total], self.needs(x), Op::Sum(x))
    }

    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let n = self.node(x).data.len() as f32;
        let total: f32 = self.node(x).data.iter().sum();
        self.push(Vec::new(), vec![total / n], self.needs(x), Op::Mean(x))
    }

    /// Softmax cross-entropy against integer labels, stabilized by
    /// max-subtraction. Records per-sample losses for callers that need them.
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<ValueId, NumericsError> {
        let shape = self.node(logits).shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![labels.len(), 0],
                got: shape,
                context: "cross_entropy logits".into(),
            });
        }
        let (bsz, classes) = (shape[0], shape[1]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(NumericsError::LabelOutOfRange {
                    index: i,
                    label: y,
                    classes,
                });
            }
        }
        let ld = &self.node(logits).data;
        let mut probs = vec![0.0f32; bsz * classes];
        let mut per_sample = vec![0.0f32; bsz];
        for b in 0..bsz {
            let row = &ld[b * classes..(b + 1) * classes];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[b * classes + c] = e;
                denom += e;
            }
            for p in &mut probs[b * classes..(b + 1) * classes] {
                *p /= denom;
            }
            per_sample[b] = denom.ln() - (row[labels[b]] - m);
        }
        let total: f32 = per_sample.iter().sum();
        let value = match reduction {
            Reduction::Mean => total / bsz as f32,
            Reduction::Sum => total,
        };
        let needs = self.needs(logits);
        Ok(self.push(
            Vec::new(),
            vec![value],
            needs,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                reduction,
                probs,
                per_sample,
            },
        ))
    }

    /// Mean over interior pixels of squared central differences, summed over
    /// both grid directions; leading dims are treated as independent planes.
    pub fn diffusion_penalty(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let shape = self.node(x).shape.clone();
        if shape.len() < 2 {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![3, 3],
                got: shape,
                context: "diffusion_penalty needs a trailing 2d grid".into(),
            });
        }
        let grid_h = shape[shape.len() - 2];
        let grid_w = shape[shape.len() - 1];
        if grid_h < 3 || grid_w < 3 {
            return Err(NumericsError::GridTooSmall {
                h: grid_h,
                w: grid_w,
            });
        }
        let planes = self.node(x).data.len() / (grid_h * grid_w);
        let count = (planes * (grid_h - 2) * (grid_w - 2)) as f32;
        let mut total = 0.0f32;
        {
            let xd = &self.node(x).data;
            for p in 0..planes {
                let base = p * grid_h * grid_w;
                for i in 1..grid_h - 1 {
                    for j in 1..grid_w - 1 {
                        let idx = base + i * grid_w + j;
                        let dr = (xd[idx + grid_w] - xd[idx - grid_w]) / 2.0;
                        let dc = (xd[idx + 1] - xd[idx - 1]) / 2.0;
                        total += dr * dr + dc * dc;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Vec::new(),
            vec![total / count],
            needs,
            Op::DiffusionPenalty { x, grid_h, grid_w },
        ))
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; call sites reset by re-registering leaves on a fresh tape.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), NumericsError> {
        if self.node(loss).data.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: self.node(loss).shape.clone(),
            });
        }
        if !self.node(loss).needs_grad {
            return Err(NumericsError::DetachedLoss);
        }
        let mut adj: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f32>)> = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(dout) = adj[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => leaf_grads.push((id, dout)),
                op => self.propagate(op, id, &dout, &mut adj),
            }
        }
        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            for (acc, d) in grad.iter_mut().zip(&g) {
                *acc += *d;
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, id: usize, dout: &[f32], adj: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Add(a, b) => {
                self.push_adj(adj, *a, dout, |d, _| d.to_vec());
                self.push_adj(adj, *b, dout, |d, _| d.to_vec());
            }
            Op::Sub(a, b) => {
                self.push_adj(adj, *a, dout, |d, _| d.to_vec());
                self.push_adj(adj, *b, dout, |d, _| d.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&self.node(*a).data, &self.node(*b).data);
                self.push_adj(adj, *a, dout, |d, _| zip_map(d, bd, |x, y| x * y));
                self.push_adj(adj, *b, dout, |d, _| zip_map(d, ad, |x, y| x * y));
            }
            Op::AddScalar(a) => self.push_adj(adj, *a, dout, |d, _| d.to_vec()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.push_adj(adj, *a, dout, |d, _| d.iter().map(|v| v * c).collect());
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (&self.node(*a).data, &self.node(*b).data);
                if self.needs(*a) {
                    // da = dout . b^T
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        let drow = &dout[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for kk in 0..k {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            let mut acc = 0.0f32;
                            for (dv, bv) in drow.iter().zip(brow) {
                                acc += dv * bv;
                            }
                            darow[kk] = acc;
                        }
                    }
                    self.add_into(adj, *a, da);
                }
                if self.needs(*b) {
                    // db = a^T . dout
                    let mut db = vec![0.0f32; k * n];
                    for i in 0..m {
                        let drow = &dout[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[kk * n..(kk + 1) * n];
                            for (o, dv) in dbrow.iter_mut().zip(drow) {
                                *o += av * dv;
                            }
                        }
                    }
                    self.add_into(adj, *b, db);
                }
            }
            Op::BiasAdd {
                x,
                bias,
                outer,
                mid,
                inner,
            } => {
                self.push_adj(adj, *x, dout, |d, _| d.to_vec());
                if self.needs(*bias) {
                    let mut db = vec![0.0f32; *mid];
                    for o in 0..*outer {
                        for c in 0..*mid {
                            let base = (o * mid + c) * inner;
                            let mut acc = 0.0f32;
                            for v in &dout[base..base + inner] {
                                acc += v;
                            }
                            db[c] += acc;
                        }
                    }
                    self.add_into(adj, *bias, db);
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let sx = &self.node(*x).shape;
                let sw = &self.node(*w).shape;
                let so = &self.nodes[id].shape;
                let dims = ConvDims {
                    bsz: sx[0],
                    cin: sx[1],
                    h: sx[2],
                    w: sx[3],
                    cout: sw[0],
                    kh: sw[2],
                    kw: sw[3],
                    oh: so[2],
                    ow: so[3],
                    stride: *stride,
                    padding: *padding,
                };
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; self.node(*x).data.len()];
                    conv2d_backward_input(&self.node(*w).data, dout, &mut dx, dims);
                    self.add_into(adj, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0f32; self.node(*w).data.len()];
                    conv2d_backward_weight(&self.node(*x).data, dout, &mut dw, dims);
                    self.add_into(adj, *w, dw);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                stride,
                padding,
            } => {
                let sx = &self.node(*x).shape;
                let sw = &self.node(*w).shape;
                let so = &self.nodes[id].shape;
                let dims = ConvDims {
                    bsz: sx[0],
                    cin: sx[1],
                    h: sx[2],
                    w: sx[3],
                    cout: sw[1],
                    kh: sw[2],
                    kw: sw[3],
                    oh: so[2],
                    ow: so[3],
                    stride: *stride,
                    padding: *padding,
                };
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; self.node(*x).data.len()];
                    convt2d_backward_input(&self.node(*w).data, dout, &mut dx, dims);
                    self.add_into(adj, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0f32; self.node(*w).data.len()];
                    convt2d_backward_weight(&self.node(*x).data, dout, &mut dw, dims);
                    self.add_into(adj, *w, dw);
                }
            }
            Op::MaxPool2d { x, argmax, .. } => {
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; self.node(*x).data.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += dout[o];
                    }
                    self.add_into(adj, *x, dx);
                }
            }
            Op::Upsample2x(x) => {
                if self.needs(*x) {
                    let sx = &self.node(*x).shape;
                    let (h, width) = (sx[2], sx[3]);
                    let ow = width * 2;
                    let mut dx = vec![0.0f32; self.node(*x).data.len()];
                    for bc in 0..sx[0] * sx[1] {
                        let xb = bc * h * width;
                        let ob = bc * h * 2 * ow;
                        for i in 0..h {
                            for j in 0..width {
                                let r0 = ob + 2 * i * ow + 2 * j;
                                dx[xb + i * width + j] =
                                    dout[r0] + dout[r0 + 1] + dout[r0 + ow] + dout[r0 + ow + 1];
                            }
                        }
                    }
                    self.add_into(adj, *x, dx);
                }
            }
            Op::Relu(x) => {
                let xd = &self.node(*x).data;
                self.push_adj(adj, *x, dout, |d, _| {
                    d.iter()
                        .zip(xd)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect()
                });
            }
            Op::Sigmoid(x) => {
                let yd = &self.nodes[id].data;
                self.push_adj(adj, *x, dout, |d, _| {
                    d.iter().zip(yd).map(|(g, y)| g * y * (1.0 - y)).collect()
                });
            }
            Op::Reshape(x) => self.push_adj(adj, *x, dout, |d, _| d.to_vec()),
            Op::Sum(x) => {
                let n = self.node(*x).data.len();
                self.push_adj(adj, *x, dout, |d, _| vec![d[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.node(*x).data.len();
                let scale = 1.0 / n as f32;
                self.push_adj(adj, *x, dout, |d, _| vec![d[0] * scale; n]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                reduction,
                probs,
                ..
            } => {
                if self.needs(*logits) {
                    let bsz = labels.len();
                    let classes = probs.len() / bsz;
                    let scale = match reduction {
                        Reduction::Mean => dout[0] / bsz as f32,
                        Reduction::Sum => dout[0],
                    };
                    let mut dl = vec![0.0f32; probs.len()];
                    for b in 0..bsz {
                        for c in 0..classes {
                            let indicator = if c == labels[b] { 1.0 } else { 0.0 };
                            dl[b * classes + c] = (probs[b * classes + c] - indicator) * scale;
                        }
                    }
                    self.add_into(adj, *logits, dl);
                }
            }
            Op::DiffusionPenalty { x, grid_h, grid_w } => {
                if self.needs(*x) {
                    let (gh, gw) = (*grid_h, *grid_w);
                    let xd = &self.node(*x).data;
                    let planes = xd.len() / (gh * gw);
                    let scale = dout[0] / (planes * (gh - 2) * (gw - 2)) as f32;
                    let mut dx = vec![0.0f32; xd.len()];
                    for p in 0..planes {
                        let base = p * gh * gw;
                        for i in 1..gh - 1 {
                            for j in 1..gw - 1 {
                                let idx = base + i * gw + j;
                                let dr = (xd[idx + gw] - xd[idx - gw]) / 2.0;
                                let dc = (xd[idx + 1] - xd[idx - 1]) / 2.0;
                                dx[idx + gw] += dr * scale;
                                dx[idx - gw] -= dr * scale;
                                dx[idx + 1] += dc * scale;
                                dx[idx - 1] -= dc * scale;
                            }
                        }
                    }
                    self.add_into(adj, *x, dx);
                }
            }
        }
    }

    fn push_adj<F>(&self, adj: &mut [Option<Vec<f32>>], target: ValueId, dout: &[f32], f: F)
    where
        F: FnOnce(&[f32], &Node) -> Vec<f32>,
    {
        if !self.needs(target) {
            return;
        }
        let contribution = f(dout, self.node(target));
        self.add_into(adj, target, contribution);
    }

    fn add_into(&self, adj: &mut [Option<Vec<f32>>], target: ValueId, contribution: Vec<f32>) {
        match &mut adj[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += *c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[derive(Clone, Copy)]
struct ConvDims {
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

fn conv_output(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Option<(usize, usize)> {
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    if ph < kh || pw < kw {
        return None;
    }
    Some(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

/// Valid output-column range so that `oj * stride + kv - padding` stays in
/// `[0, w)`.
fn col_range(d: ConvDims, kv: usize) -> (usize, usize) {
    let lo = if d.padding > kv {
        (d.padding - kv).div_ceil(d.stride)
    } else {
        0
    };
    let max_num = d.w + d.padding;
    let hi = if max_num > kv {
        ((max_num - 1 - kv) / d.stride + 1).min(d.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv2d_forward(x: &[f32], w: &[f32], out: &mut [f32], d: ConvDims) {
    for b in 0..d.bsz {
        for co in 0..d.cout {
            let out_base = (b * d.cout + co) * d.oh * d.ow;
            for ci in 0..d.cin {
                let x_base = (b * d.cin + ci) * d.h * d.w;
                let w_base = (co * d.cin + ci) * d.kh * d.kw;
                for ku in 0..d.kh {
                    for kv in 0..d.kw {
                        let wv = w[w_base + ku * d.kw + kv];
                        let (lo, hi) = col_range(d, kv);
                        for oi in 0..d.oh {
                            let iy = oi * d.stride + ku;
                            if iy < d.padding || iy - d.padding >= d.h {
                                continue;
                            }
                            let xrow = x_base + (iy - d.padding) * d.w;
                            let orow = out_base + oi * d.ow;
                            if d.stride == 1 {
                                let off = (xrow + lo + kv) as isize - d.padding as isize;
                                let xs = &x[off as usize..off as usize + (hi - lo)];
                                let os = &mut out[orow + lo..orow + hi];
                                for (o, xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for oj in lo..hi {
                                    let ix = oj * d.stride + kv - d.padding;
                                    out[orow + oj] += wv * x[xrow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input(w: &[f32], dout: &[f32], dx: &mut [f32], d: ConvDims) {
    for b in 0..d.bsz {
        for co in 0..d.cout {
            let out_base = (b * d.cout + co) * d.oh * d.ow;
            for ci in 0..d.cin {
                let x_base = (b * d.cin + ci) * d.h * d.w;
                let w_base = (co * d.cin + ci) * d.kh * d.kw;
                for ku in 0..d.kh {
                    for kv in 0..d.kw {
                        let wv = w[w_base + ku * d.kw + kv];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = col_range(d, kv);
                        for oi in 0..d.oh {
                            let iy = oi * d.stride + ku;
                            if iy < d.padding || iy - d.padding >= d.h {
                                continue;
                            }
                            let xrow = x_base + (iy - d.padding) * d.w;
                            let orow = out_base + oi * d.ow;
                            if d.stride == 1 {
                                let off = (xrow + lo + kv) as isize - d.padding as isize;
                                let xs = &mut dx[off as usize..off as usize + (hi - lo)];
                                let os = &dout[orow + lo..orow + hi];
                                for (xg, o) in xs.iter_mut().zip(os) {
                                    *xg += wv * o;
                                }
                            } else {
                                for oj in lo..hi {
                                    let ix = oj * d.stride + kv - d.padding;
                                    dx[xrow + ix] += wv * dout[orow + oj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight(x: &[f32], dout: &[f32], dw: &mut [f32], d: ConvDims) {
    for b in 0..d.bsz {
        for co in 0..d.cout {
            let out_base = (b * d.cout + co) * d.oh * d.ow;
            for ci in 0..d.cin {
                let x_base = (b * d.cin + ci) * d.h * d.w;
                let w_base = (co * d.cin + ci) * d.kh * d.kw;
                for ku in 0..d.kh {
                    for kv in 0..d.kw {
                        let (lo, hi) = col_range(d, kv);
                        let mut acc = 0.0f32;
                        for oi in 0..d.oh {
                            let iy = oi * d.stride + ku;
                            if iy < d.padding || iy - d.padding >= d.h {
                                continue;
                            }
                            let xrow = x_base + (iy - d.padding) * d.w;
                            let orow = out_base + oi * d.ow;
                            if d.stride == 1 {
                                let off = (xrow + lo + kv) as isize - d.padding as isize;
                                let xs = &x[off as usize..off as usize + (hi - lo)];
                                let os = &dout[orow + lo..orow + hi];
                                for (xv, o) in xs.iter().zip(os) {
                                    acc += xv * o;
                                }
                            } else {
                                for oj in lo..hi {
                                    let ix = oj * d.stride + kv - d.padding;
                                    acc += x[xrow + ix] * dout[orow + oj];
                                }
                            }
                        }
                        dw[w_base + ku * d.kw + kv] += acc;
                    }
                }
            }
        }
    }
}

fn convt2d_forward(x: &[f32], w: &[f32], out: &mut [f32], d: ConvDims) {
    for b in 0..d.bsz {
        for ci in 0..d.cin {
            let x_base = (b * d.cin + ci) * d.h * d.w;
            for co in 0..d.cout {
                let out_base = (b * d.cout + co) * d.oh * d.ow;
                let w_base = (ci * d.cout + co) * d.kh * d.kw;
                for ku in 0..d.kh {
                    for kv in 0..d.kw {
                        let wv = w[w_base + ku * d.kw + kv];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..d.h {
                            let oi = i * d.stride + ku;
                            if oi < d.padding || oi - d.padding >= d.oh {
                                continue;
                            }
                            let orow = out_base + (oi - d.padding) * d.ow;
                            let xrow = x_base + i * d.w;
                            for j in 0..d.w {
                                let oj = j * d.stride + kv;
                                if oj < d.padding || oj - d.padding >= d.ow {
                                    continue;
                                }
                                out[orow + oj - d.padding] += wv * x[xrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn convt2d_backward_input(w: &[f32], dout: &[f32], dx: &mut [f32], d: ConvDims) {
    for b in 0..d.bsz {
        for ci in 0..d.cin {
            let x_base = (b * d.cin + ci) * d.h * d.w;
            for co in 0..d.cout {
                let out_base = (b * d.cout + co) * d.oh * d.ow;
                let w_base = (ci * d.cout + co) * d.kh * d.kw;
                for ku in 0..d.kh {
                    for kv in 0..d.kw {
                        let wv = w[w_base + ku * d.kw + kv];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..d.h {
                            let oi = i * d.stride + ku;
                            if oi < d.padding || oi - d.padding >= d.oh {
                                continue;
                            }
                            let orow = out_base + (oi - d.padding) * d.ow;
                            let xrow = x_base + i * d.w;
                            for j in 0..d.w {
                                let oj = j * d.stride + kv;
                                if oj < d.padding || oj - d.padding >= d.ow {
                                    continue;
                                }
                                dx[xrow + j] += wv * dout[orow + oj - d.padding];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn convt2d_backward_weight(x: &[f32], dout: &[f32], dw: &mut [f32], d: ConvDims) {
    for b in 0..d.bsz {
        for ci in 0..d.cin {
            let x_base = (b * d.cin + ci) * d.h * d.w;
            for co in 0..d.cout {
                let out_base = (b * d.cout + co) * d.oh * d.ow;
                let w_base = (ci * d.cout + co) * d.kh * d.kw;
                for ku in 0..d.kh {
                    for kv in 0..d.kw {
                        let mut acc = 0.0f32;
                        for i in 0..d.h {
                            let oi = i * d.stride + ku;
                            if oi < d.padding || oi - d.padding >= d.oh {
                                continue;
                            }
                            let orow = out_base + (oi - d.padding) * d.ow;
                            let xrow = x_base + i * d.w;
                            for j in 0..d.w {
                                let oj = j * d.stride + kv;
                                if oj < d.padding || oj - d.padding >= d.ow {
                                    continue;
                                }
                                acc += x[xrow + j] * dout[orow + oj - d.padding];
                            }
                        }
                        dw[w_base + ku * d.kw + kv] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap().with_requires_grad()
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad(&[2, 3], vec![1.0, -1.0, 2.0, 0.5, 3.0, -2.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad(&[2], vec![1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad(&[2], vec![3.0, 4.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad(&[2], vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn detached_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
        let loss = tape.sum(x);
        assert!(matches!(
            tape.backward(loss),
            Err(NumericsError::DetachedLoss)
        ));
    }

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        // 3x3 all-ones kernel over a 3x3 all-ones image, stride 1, zero pad:
        // the center output sums all nine pixels.
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = tape.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        let v = tape.value(y);
        assert_eq!(v[4], 9.0);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[1], 6.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[2, 4], vec![0.5; 8]).unwrap();
        let loss = tape
            .cross_entropy(logits, &[0, 3], Reduction::Mean)
            .unwrap();
        let expected = (4.0f32).ln();
        assert!((tape.value(loss)[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[1, 4], vec![0.0; 4]).unwrap();
        let err = tape
            .cross_entropy(logits, &[4], Reduction::Mean)
            .unwrap_err();
        assert!(matches!(
            err,
            NumericsError::LabelOutOfRange {
                index: 0,
                label: 4,
                classes: 4
            }
        ));
    }

    #[test]
    fn relu_forward_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad(&[1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]));
        let y = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y), &[5.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_gradient_sums_replicas() {
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad(&[1, 1, 1, 1], vec![2.0]));
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.value(y), &[2.0; 4]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&leaf_grad(&[1, 1, 4, 4], (0..16).map(|i| i as f32 * 0.13 - 0.7).collect()));
            let w = tape
                .constant(&[2, 1, 3, 3], (0..18).map(|i| (i as f32 * 0.31).sin()).collect())
                .unwrap();
            let c = tape.conv2d(x, w, 1, 1).unwrap();
            let r = tape.relu(c);
            let loss = tape.mean(r);
            tape.backward(loss).unwrap();
            (tape.value(loss).to_vec(), tape.grad(x).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
