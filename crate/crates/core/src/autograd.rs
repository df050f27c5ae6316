//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] records every op of one forward pass. Values are stored in
//! the tape; backward closures capture whatever extra state they need
//! (normalized activations, masks). Convolutions unfold their input again
//! during backward instead of keeping the columns. Ops run in a fixed order
//! and reduce in a fixed order, so repeated passes are bitwise identical.

use crate::conv::{
    conv_forward_block, conv_input_grad_block, conv_weight_grad_block, ConvGeometry, TapTable,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Target size in elements of one unfolded column block.
const COL_BLOCK: usize = 1 << 16;
/// Narrower blocks starve the GEMM kernel.
const MIN_BLOCK_POSITIONS: usize = 256;

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Receives the input values, the op's output and the gradient w.r.t. the
/// output; returns one optional gradient per input.
pub type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing is kept for backward.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, vec![], None)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, rg, vec![], None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        inputs: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an op with a hand-written vector-Jacobian product.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor<T>, backward: F) -> Var
    where
        F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let bw: Option<BackwardFn<T>> = if rg { Some(Box::new(backward)) } else { None };
        self.push(value, rg, inputs.iter().map(|v| v.0).collect(), bw)
    }

    fn needs(&self, v: Var) -> bool {
        self.grad_enabled && self.nodes[v.0].requires_grad
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::ONE));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = bw(&inputs, &node.value, &g);
            for (&i, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[i].requires_grad {
                    continue;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- ops ---------------------------------------------------------

    /// 3D convolution over `[B, C, T, H, W]`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var, geo: ConvGeometry) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || xs[1] != geo.in_channels {
            return Err(Error::Shape(format!(
                "conv3d expects [B, {}, T, H, W], got {xs:?}",
                geo.in_channels
            )));
        }
        if self.shape(weight) != geo.weight_shape() || self.shape(bias) != [geo.out_channels] {
            return Err(Error::Shape("conv3d parameter shape".into()));
        }
        let batch = xs[0];
        let input = [xs[2], xs[3], xs[4]];
        let out = geo.output_dims(input)?;
        let k = geo.in_channels * geo.taps();
        let n: usize = out.iter().product();
        let co = geo.out_channels;
        let in_stride = geo.in_channels * input.iter().product::<usize>();
        let out_stride = co * n;
        // column blocks of whole output rows, sized to stay in cache
        let table = TapTable::build(&geo, input)?;
        let row_len = table.row_len();
        let block_rows = (COL_BLOCK / (k * row_len))
            .max(MIN_BLOCK_POSITIONS.div_ceil(row_len))
            .clamp(1, table.rows());
        let blocks: Vec<std::ops::Range<usize>> = (0..table.rows())
            .step_by(block_rows)
            .map(|r| r..(r + block_rows).min(table.rows()))
            .collect();
        let pointwise = geo.is_pointwise();

        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut y = vec![T::ZERO; batch * out_stride];
        let cin = geo.in_channels;
        let padded_len = if pointwise {
            0
        } else {
            cin * table.padded_plane()
        };
        let mut padded = vec![T::ZERO; padded_len];
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![T::ZERO; k * block_rows * row_len]
        };
        for b in 0..batch {
            let xb = &xv[b * in_stride..(b + 1) * in_stride];
            let yb = &mut y[b * out_stride..(b + 1) * out_stride];
            if pointwise {
                conv_forward_block(wv, bv, xb, [co, k, n], yb, n);
                continue;
            }
            table.pad(xb, cin, &mut padded);
            for rows in &blocks {
                let p0 = rows.start * row_len;
                let bn = rows.len() * row_len;
                table.im2col_rows(&padded, cin, rows.clone(), &mut col[..k * bn]);
                conv_forward_block(wv, bv, &col[..k * bn], [co, k, bn], &mut yb[p0..], n);
            }
        }
        let value = Tensor::from_vec(&[batch, co, out[0], out[1], out[2]], y)?;
        let need_dx = self.needs(x);
        Ok(self.custom(&[x, weight, bias], value, move |inp, _out, g| {
            let gy = g.data();
            let wv = inp[1].data();
            let mut dw = vec![T::ZERO; wv.len()];
            let mut db = vec![T::ZERO; co];
            let mut dx = if need_dx {
                vec![T::ZERO; batch * in_stride]
            } else {
                Vec::new()
            };
            // columns are rebuilt here rather than kept from the forward pass
            let cap = if pointwise {
                0
            } else {
                k * block_rows * row_len
            };
            let mut col = vec![T::ZERO; cap];
            let mut dcol = if need_dx {
                vec![T::ZERO; cap]
            } else {
                Vec::new()
            };
            let mut padded = vec![T::ZERO; padded_len];
            let mut dpadded = if need_dx {
                vec![T::ZERO; padded_len]
            } else {
                Vec::new()
            };
            for b in 0..batch {
                let gyb = &gy[b * out_stride..(b + 1) * out_stride];
                let xb = &inp[0].data()[b * in_stride..(b + 1) * in_stride];
                for (o, row) in gyb.chunks(n).enumerate() {
                    db[o] += row.iter().copied().sum::<T>();
                }
                if pointwise {
                    conv_weight_grad_block(gyb, n, xb, [co, k, n], &mut dw);
                    if need_dx {
                        let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
                        conv_input_grad_block(wv, gyb, n, [co, k, n], dxb);
                    }
                    continue;
                }
                table.pad(xb, cin, &mut padded);
                if need_dx {
                    dpadded.fill(T::ZERO);
                }
                for rows in &blocks {
                    let p0 = rows.start * row_len;
                    let bn = rows.len() * row_len;
                    let col = &mut col[..k * bn];
                    table.im2col_rows(&padded, cin, rows.clone(), col);
                    conv_weight_grad_block(&gyb[p0..], n, col, [co, k, bn], &mut dw);
                    if need_dx {
                        let dcol = &mut dcol[..k * bn];
                        conv_input_grad_block(wv, &gyb[p0..], n, [co, k, bn], dcol);
                        table.col2im_rows(dcol, cin, rows.clone(), &mut dpadded);
                    }
                }
                if need_dx {
                    table.unpad_add(&dpadded, cin, &mut dx[b * in_stride..(b + 1) * in_stride]);
                }
            }
            vec![
                need_dx.then(|| Tensor::from_vec(inp[0].shape(), dx).expect("dx shape")),
                Some(Tensor::from_vec(inp[1].shape(), dw).expect("dw shape")),
                Some(Tensor::from_vec(inp[2].shape(), db).expect("db shape")),
            ]
        }))
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, channels) = (xs[0], xs[1]);
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        let spatial: usize = xs[2..].iter().product();
        let per_group = channels / groups * spatial;
        let eps = T::from_f64(1e-5);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; batch * groups];
        let count = T::from_f64(per_group as f64);
        for bg in 0..batch * groups {
            let s = &xv[bg * per_group..(bg + 1) * per_group];
            let mean = s.iter().copied().sum::<T>() / count;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let r = T::ONE / (var + eps).sqrt();
            rstd[bg] = r;
            for (o, &v) in xhat[bg * per_group..(bg + 1) * per_group].iter_mut().zip(s) {
                *o = (v - mean) * r;
            }
        }
        let mut y = xhat.clone();
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * spatial;
                for v in &mut y[off..off + spatial] {
                    *v = *v * gv[c] + bv[c];
                }
            }
        }
        let value = Tensor::from_vec(&xs, y)?;
        let xhat_kept = if self.grad_enabled { xhat } else { Vec::new() };
        Ok(self.custom(&[x, gamma, beta], value, move |_inp, _out, g| {
            let gy = g.data();
            let mut dgamma = vec![T::ZERO; channels];
            let mut dbeta = vec![T::ZERO; channels];
            let mut dx = vec![T::ZERO; gy.len()];
            let cpg = channels / groups;
            for b in 0..batch {
                for grp in 0..groups {
                    let bg = b * groups + grp;
                    let base = bg * per_group;
                    let mut sum_d = T::ZERO;
                    let mut sum_dx = T::ZERO;
                    for cc in 0..cpg {
                        let c = grp * cpg + cc;
                        let off = base + cc * spatial;
                        for i in off..off + spatial {
                            dgamma[c] += gy[i] * xhat_kept[i];
                            dbeta[c] += gy[i];
                            let d = gy[i] * gv[c];
                            dx[i] = d;
                            sum_d += d;
                            sum_dx += d * xhat_kept[i];
                        }
                    }
                    let md = sum_d / count;
                    let mdx = sum_dx / count;
                    let r = rstd[bg];
                    for i in base..base + per_group {
                        dx[i] = r * (dx[i] - md - xhat_kept[i] * mdx);
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(&xs, dx).expect("dx")),
                Some(Tensor::from_vec(&[channels], dgamma).expect("dgamma")),
                Some(Tensor::from_vec(&[channels], dbeta).expect("dbeta")),
            ]
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::ZERO));
        self.custom(&[x], value, |_inp, out, g| {
            let d = out
                .data()
                .iter()
                .zip(g.data())
                .map(|(&o, &gv)| if o > T::ZERO { gv } else { T::ZERO })
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d).expect("relu"))]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(Scalar::sigmoid);
        self.custom(&[x], value, |_inp, out, g| {
            let d = out
                .data()
                .iter()
                .zip(g.data())
                .map(|(&s, &gv)| gv * s * (T::ONE - s))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d).expect("sigmoid"))]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.custom(&[a, b], value, |_inp, _out, g| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::ZERO;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            total += w * self.value(v).item();
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(
            self.custom(&vars, Tensor::scalar(total), move |inp, _out, g| {
                let gv = g.item();
                inp.iter()
                    .zip(&weights)
                    .map(|(t, &w)| Some(Tensor::full(t.shape(), gv * w)))
                    .collect()
            }),
        )
    }

    /// Per-frame map weighting: `h[b,c,t,y,x] · m[b,0,t,y,x]` for every channel.
    pub fn mul_map(&mut self, h: Var, m: Var) -> Result<Var> {
        let hs = self.shape(h).to_vec();
        let ms = self.shape(m).to_vec();
        if hs.len() != 5 || ms.len() != 5 || ms[1] != 1 || hs[0] != ms[0] || hs[2..] != ms[2..] {
            return Err(Error::Shape(format!(
                "map {ms:?} does not match features {hs:?}"
            )));
        }
        let (batch, channels) = (hs[0], hs[1]);
        let plane: usize = hs[2..].iter().product();
        let hv = self.value(h).data();
        let mv = self.value(m).data();
        let mut y = vec![T::ZERO; hv.len()];
        for b in 0..batch {
            let mb = &mv[b * plane..(b + 1) * plane];
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for ((o, &x), &w) in y[off..off + plane]
                    .iter_mut()
                    .zip(&hv[off..off + plane])
                    .zip(mb)
                {
                    *o = x * w;
                }
            }
        }
        let value = Tensor::from_vec(&hs, y)?;
        Ok(self.custom(&[h, m], value, move |inp, _out, g| {
            let (hv, mv, gv) = (inp[0].data(), inp[1].data(), g.data());
            let mut dh = vec![T::ZERO; hv.len()];
            let mut dm = vec![T::ZERO; mv.len()];
            for b in 0..batch {
                for c in 0..channels {
                    let off = (b * channels + c) * plane;
                    for i in 0..plane {
                        dh[off + i] = gv[off + i] * mv[b * plane + i];
                        dm[b * plane + i] += gv[off + i] * hv[off + i];
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(inp[0].shape(), dh).expect("dh")),
                Some(Tensor::from_vec(inp[1].shape(), dm).expect("dm")),
            ]
        }))
    }

    /// Concatenate `[B, Cᵢ, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let batch = first[0];
        let rest = first[2..].to_vec();
        let plane: usize = rest.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[0] != batch || s[2..] != rest[..] {
                return Err(Error::Shape(format!("concat {first:?} with {s:?}")));
            }
            widths.push(s[1]);
        }
        let total_c: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(batch * total_c * plane);
        for b in 0..batch {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                y.extend_from_slice(&d[b * w * plane..(b + 1) * w * plane]);
            }
        }
        let mut shape = vec![batch, total_c];
        shape.extend(&rest);
        let value = Tensor::from_vec(&shape, y)?;
        Ok(self.custom(parts, value, move |inp, _out, g| {
            let gv = g.data();
            let mut out: Vec<Vec<T>> = widths
                .iter()
                .map(|&w| Vec::with_capacity(batch * w * plane))
                .collect();
            let mut off = 0;
            for _ in 0..batch {
                for (o, &w) in out.iter_mut().zip(&widths) {
                    o.extend_from_slice(&gv[off..off + w * plane]);
                    off += w * plane;
                }
            }
            out.into_iter()
                .zip(inp)
                .map(|(d, t)| Some(Tensor::from_vec(t.shape(), d).expect("concat grad")))
                .collect()
        }))
    }

    /// Channel `index` of `[B, C, ...]` as `[B, 1, ...]`.
    pub fn select_channel(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let channels = xs[1];
        if index >= channels {
            return Err(Error::Shape(format!("channel {index} of {xs:?}")));
        }
        let plane: usize = xs[2..].iter().product();
        let d = self.value(x).data();
        let mut y = Vec::with_capacity(xs[0] * plane);
        for b in 0..xs[0] {
            let off = (b * channels + index) * plane;
            y.extend_from_slice(&d[off..off + plane]);
        }
        let mut shape = xs.clone();
        shape[1] = 1;
        let value = Tensor::from_vec(&shape, y)?;
        Ok(self.custom(&[x], value, move |_inp, _out, g| {
            let mut dx = vec![T::ZERO; xs.iter().product()];
            for b in 0..xs[0] {
                let off = (b * channels + index) * plane;
                dx[off..off + plane].copy_from_slice(&g.data()[b * plane..(b + 1) * plane]);
            }
            vec![Some(Tensor::from_vec(&xs, dx).expect("select grad"))]
        }))
    }

    /// Mean over every axis after the channel axis: `[B, C, ...] → [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (batch, channels) = (xs[0], xs[1]);
        let plane: usize = xs[2..].iter().product();
        let inv = T::ONE / T::from_f64(plane as f64);
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[batch, channels], y).expect("pool shape");
        self.custom(&[x], value, move |_inp, _out, g| {
            let mut dx = Vec::with_capacity(batch * channels * plane);
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv * inv, plane));
            }
            vec![Some(Tensor::from_vec(&xs, dx).expect("pool grad"))]
        })
    }

    /// `y[B, O] = x[B, D] · wᵀ + b` with `w` shaped `[O, D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!("linear {xs:?} x {ws:?}")));
        }
        let (batch, d, o) = (xs[0], xs[1], ws[0]);
        let mut y: Vec<T> = (0..batch)
            .flat_map(|_| self.value(b).data().to_vec())
            .collect();
        T::gemm(
            batch,
            d,
            o,
            T::ONE,
            self.value(x).data(),
            d as isize,
            1,
            self.value(w).data(),
            1,
            d as isize,
            T::ONE,
            &mut y,
            o as isize,
            1,
        );
        let value = Tensor::from_vec(&[batch, o], y)?;
        Ok(self.custom(&[x, w, b], value, move |inp, _out, g| {
            let gv = g.data();
            let mut dx = vec![T::ZERO; batch * d];
            T::gemm(
                batch,
                o,
                d,
                T::ONE,
                gv,
                o as isize,
                1,
                inp[1].data(),
                d as isize,
                1,
                T::ZERO,
                &mut dx,
                d as isize,
                1,
            );
            let mut dw = vec![T::ZERO; o * d];
            T::gemm(
                o,
                batch,
                d,
                T::ONE,
                gv,
                1,
                o as isize,
                inp[0].data(),
                d as isize,
                1,
                T::ZERO,
                &mut dw,
                d as isize,
                1,
            );
            let mut db = vec![T::ZERO; o];
            for row in gv.chunks(o) {
                for (a, &v) in db.iter_mut().zip(row) {
                    *a += v;
                }
            }
            vec![
                Some(Tensor::from_vec(&[batch, d], dx).expect("dx")),
                Some(Tensor::from_vec(&[o, d], dw).expect("dw")),
                Some(Tensor::from_vec(&[o], db).expect("db")),
            ]
        }))
    }

    /// Row-wise softmax of `[B, L]` logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape(format!("softmax expects [B, L], got {xs:?}")));
        }
        let l = xs[1];
        let mut y = self.value(x).data().to_vec();
        for row in y.chunks_mut(l) {
            let m = row.iter().copied().fold(row[0], Scalar::max);
            let mut s = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let value = Tensor::from_vec(&xs, y)?;
        Ok(self.custom(&[x], value, move |_inp, out, g| {
            let mut dx = vec![T::ZERO; out.numel()];
            for ((p, gr), d) in out
                .data()
                .chunks(l)
                .zip(g.data().chunks(l))
                .zip(dx.chunks_mut(l))
            {
                let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for i in 0..l {
                    d[i] = p[i] * (gr[i] - dot);
                }
            }
            vec![Some(
                Tensor::from_vec(out.shape(), dx).expect("softmax grad"),
            )]
        }))
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use crate::conv::PadMode;

    /// Builds `Σ r ⊙ op(inputs)` so every output element contributes.
    fn check_op(inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |vals: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
            let y = op(&mut g, &vars);
            let r = pseudo(g.shape(y), 7);
            let rv = g.constant(r);
            let prod = g.mul_elem_for_test(y, rv);
            let grads = g.backward(prod).unwrap();
            let gs = vars
                .iter()
                .map(|&v| {
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(vals[0].shape()))
                })
                .collect();
            (g.value(prod).item(), gs)
        };
        let (_, analytic) = eval(&inputs);
        for (i, x) in inputs.iter().enumerate() {
            let numeric = numeric_grad(x, 1e-6, |xp| {
                let mut vals = inputs.clone();
                vals[i] = xp.clone();
                eval(&vals).0
            });
            let err = rel_err(analytic[i].data(), &numeric);
            assert!(err < 1e-6, "input {i}: rel err {err}");
        }
    }

    impl Graph<f64> {
        fn mul_elem_for_test(&mut self, a: Var, r: Var) -> Var {
            let s: f64 = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(r).data())
                .map(|(x, y)| x * y)
                .sum();
            self.custom(&[a, r], Tensor::scalar(s), |inp, _o, g| {
                vec![Some(inp[1].map(|v| v * g.item())), None]
            })
        }
    }

    #[test]
    fn conv3d_gradients() {
        for mode in [PadMode::Zeros, PadMode::Replicate] {
            let geo = ConvGeometry::new(2, 3, [3, 3, 3], [1, 2, 2], mode);
            check_op(
                vec![
                    pseudo(&[2, 2, 3, 5, 4], 1),
                    pseudo(&geo.weight_shape(), 2),
                    pseudo(&[3], 3),
                ],
                move |g, v| g.conv3d(v[0], v[1], v[2], geo).unwrap(),
            );
        }
        let geo = ConvGeometry::pointwise(4, 2);
        check_op(
            vec![
                pseudo(&[2, 4, 2, 2, 3], 4),
                pseudo(&geo.weight_shape(), 5),
                pseudo(&[2], 6),
            ],
            move |g, v| g.conv3d(v[0], v[1], v[2], geo).unwrap(),
        );
    }

    #[test]
    fn blocked_conv3d_gradients() {
        // Large enough planes that the unfolded columns are built in several row blocks.
        for (geo, shape) in [
            (
                ConvGeometry::new(1, 2, [1, 3, 3], [1, 1, 1], PadMode::Zeros),
                [1, 1, 2, 130, 130],
            ),
            (
                ConvGeometry::new(2, 2, [3, 3, 3], [1, 2, 2], PadMode::Replicate),
                [1, 2, 3, 96, 96],
            ),
        ] {
            let inputs = [
                pseudo(&shape, 1),
                pseudo(&geo.weight_shape(), 2),
                pseudo(&[2], 3),
            ];
            let eval = |vals: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
                let mut g = Graph::new();
                let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
                let y = g.conv3d(vars[0], vars[1], vars[2], geo).unwrap();
                let r = g.constant(pseudo(g.shape(y), 7));
                let prod = g.mul_elem_for_test(y, r);
                let grads = g.backward(prod).unwrap();
                let gs = vars
                    .iter()
                    .map(|&v| grads.get(v).unwrap().clone())
                    .collect();
                (g.value(prod).item(), gs)
            };
            let (_, analytic) = eval(&inputs);
            let h = 1e-5;
            let probe = |i: usize, idx: usize| {
                let mut vals = inputs.to_vec();
                let orig = vals[i].data()[idx];
                vals[i].data_mut()[idx] = orig + h;
                let fp = eval(&vals).0;
                vals[i].data_mut()[idx] = orig - h;
                (fp - eval(&vals).0) / (2.0 * h)
            };
            let w_num: Vec<f64> = (0..inputs[1].numel()).map(|j| probe(1, j)).collect();
            assert!(rel_err(analytic[1].data(), &w_num) < 1e-6);
            let n = inputs[0].numel();
            for idx in (0..n).step_by(n / 37) {
                let num = probe(0, idx);
                let ana = analytic[0].data()[idx];
                assert!(
                    (num - ana).abs() < 1e-6 * (1.0 + ana.abs()),
                    "x[{idx}]: {ana} vs {num}"
                );
            }
        }
    }

    #[test]
    fn group_norm_gradients() {
        check_op(
            vec![
                pseudo(&[2, 4, 2, 3, 3], 1),
                pseudo(&[4], 2),
                pseudo(&[4], 3),
            ],
            |g, v| g.group_norm(v[0], v[1], v[2], 2).unwrap(),
        );
    }

    #[test]
    fn elementwise_gradients() {
        check_op(vec![pseudo(&[2, 3, 2], 1)], |g, v| g.sigmoid(v[0]));
        check_op(vec![pseudo(&[2, 3, 2], 2)], |g, v| g.relu(v[0]));
        check_op(vec![pseudo(&[2, 3], 1), pseudo(&[2, 3], 9)], |g, v| {
            g.add(v[0], v[1]).unwrap()
        });
        check_op(vec![pseudo(&[2, 5], 1)], |g, v| g.softmax(v[0]).unwrap());
    }

    #[test]
    fn structural_gradients() {
        check_op(
            vec![pseudo(&[2, 3, 2, 2, 2], 1), pseudo(&[2, 1, 2, 2, 2], 4)],
            |g, v| g.mul_map(v[0], v[1]).unwrap(),
        );
        check_op(
            vec![pseudo(&[2, 2, 1, 2, 2], 1), pseudo(&[2, 3, 1, 2, 2], 2)],
            |g, v| g.concat_channels(&[v[0], v[1]]).unwrap(),
        );
        check_op(vec![pseudo(&[2, 3, 2, 2, 2], 1)], |g, v| {
            g.select_channel(v[0], 1).unwrap()
        });
        check_op(vec![pseudo(&[2, 3, 2, 2, 2], 1)], |g, v| {
            g.global_avg_pool(v[0])
        });
        check_op(
            vec![pseudo(&[3, 4], 1), pseudo(&[2, 4], 2), pseudo(&[2], 3)],
            |g, v| g.linear(v[0], v[1], v[2]).unwrap(),
        );
    }

    #[test]
    fn inference_graph_records_no_backward() {
        let mut g = Graph::<f32>::inference();
        let x = g.leaf(Tensor::ones(&[1, 2]));
        let y = g.sigmoid(x);
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(g.backward(x).is_err());
    }
}
