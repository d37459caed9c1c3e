//! The autodiff graph: a flat arena of nodes with explicit backward rules.

use super::conv::{col2im, conv_out_size, im2col};
use super::params::{ParamId, ParamStore};
use super::tensor::{Shape, Tensor};
use super::{matmul, Scalar};
use crate::geometry::CameraIntrinsics;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op<S: Scalar> {
    Leaf {
        param: Option<ParamId>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: S,
    },
    SumScalars {
        xs: Vec<NodeId>,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    GatherChannel {
        x: NodeId,
        idx: Vec<usize>,
    },
    GatherElems {
        x: NodeId,
        idx: Vec<usize>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    AvgPool {
        x: NodeId,
        factor: usize,
    },
    UpsampleNearest2 {
        x: NodeId,
    },
    RoiAlign {
        feat: NodeId,
        coords: NodeId,
        batch_idx: Vec<usize>,
        out_size: usize,
    },
    PointCloud {
        depth: NodeId,
        ks: Vec<CameraIntrinsics>,
    },
    L1Mean {
        x: NodeId,
        target: Tensor<S>,
    },
    SoftmaxCeSum {
        logits: NodeId,
        labels: Vec<usize>,
    },
    BceLogits {
        logits: NodeId,
        target: Tensor<S>,
        per_row: bool,
    },
    SmoothL1Sum {
        pred: NodeId,
        target: Tensor<S>,
        beta: S,
    },
    VolumeLossSum {
        v: NodeId,
        v_star: Vec<S>,
        alpha: S,
        eps: S,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.maximum(S::ZERO));
        self.push(v, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| S::ONE / (S::ONE + (-a).exp()));
        self.push(v, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let mut v = va.clone();
        v.add_assign(vb);
        self.push(v, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        self.push(Tensor::from_vec(va.shape, data), Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, k: S) -> NodeId {
        let v = self.value(x).map(|a| a * k);
        self.push(v, Op::Scale { x, k })
    }

    /// Sum of scalar nodes. The empty sum is a constant 0 leaf.
    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        if xs.is_empty() {
            return self.leaf(Tensor::scalar(S::ZERO));
        }
        let mut total = S::ZERO;
        for &x in xs {
            total += self.value(x).item();
        }
        self.push(
            Tensor::scalar(total),
            Op::SumScalars { xs: xs.to_vec() },
        )
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape;
        let total_c: usize = parts.iter().map(|&p| self.value(p).shape.c).sum();
        let out_shape = Shape::new(first.n, total_c, first.h, first.w);
        let mut out = Tensor::zeros(out_shape);
        for n in 0..first.n {
            let mut c_off = 0;
            for &p in parts {
                let vp = self.value(p);
                assert_eq!(vp.shape.n, first.n);
                assert_eq!((vp.shape.h, vp.shape.w), (first.h, first.w));
                let plane = vp.shape.h * vp.shape.w;
                let src = vp.batch_item(n);
                let dst_base = out.idx(n, c_off, 0, 0);
                out.data[dst_base..dst_base + vp.shape.c * plane].copy_from_slice(src);
                c_off += vp.shape.c;
            }
        }
        self.push(
            out,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
        )
    }

    /// Concatenation along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape;
        let total_n: usize = parts.iter().map(|&p| self.value(p).shape.n).sum();
        let mut data = Vec::with_capacity(total_n * first.c * first.h * first.w);
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(
                (vp.shape.c, vp.shape.h, vp.shape.w),
                (first.c, first.h, first.w),
                "concat_rows row shape mismatch"
            );
            data.extend_from_slice(&vp.data);
        }
        self.push(
            Tensor::from_vec(Shape::new(total_n, first.c, first.h, first.w), data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    /// Select rows (dim 0 slices); rows may repeat.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let vx = self.value(x);
        let row_len = vx.shape.c * vx.shape.h * vx.shape.w;
        let mut out = Tensor::zeros(Shape::new(rows.len(), vx.shape.c, vx.shape.h, vx.shape.w));
        for (i, &r) in rows.iter().enumerate() {
            out.data[i * row_len..(i + 1) * row_len].copy_from_slice(vx.batch_item(r));
        }
        self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Per-row channel selection: out[p, 0] = x[p, idx[p]].
    pub fn gather_channel(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape.n, idx.len());
        let plane = vx.shape.h * vx.shape.w;
        let mut out = Tensor::zeros(Shape::new(vx.shape.n, 1, vx.shape.h, vx.shape.w));
        for (p, &c) in idx.iter().enumerate() {
            let base = vx.idx(p, c, 0, 0);
            out.data[p * plane..(p + 1) * plane]
                .copy_from_slice(&vx.data[base..base + plane]);
        }
        self.push(
            out,
            Op::GatherChannel {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Flat element gather: out row i = x.data[idx[i]], shape (K, 1, 1, 1).
    pub fn gather_elems(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let vx = self.value(x);
        let data: Vec<S> = idx.iter().map(|&i| vx.data[i]).collect();
        self.push(
            Tensor::from_vec(Shape::new(idx.len(), 1, 1, 1), data),
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// 2D convolution; weight shape (C_out, C_in, k, k), bias (C_out,1,1,1).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let k = vw.shape.h;
        assert_eq!(vw.shape.w, k);
        assert_eq!(vw.shape.c, vx.shape.c, "conv in-channel mismatch");
        let (n, c_in, h, w_in) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
        let c_out = vw.shape.n;
        let out_h = conv_out_size(h, k, stride, pad);
        let out_w = conv_out_size(w_in, k, stride, pad);
        let mut out = Tensor::zeros(Shape::new(n, c_out, out_h, out_w));
        let kk = c_in * k * k;
        let mut col = vec![S::ZERO; kk * out_h * out_w];
        for item in 0..n {
            im2col(
                vx.batch_item(item),
                c_in,
                h,
                w_in,
                k,
                stride,
                pad,
                out_h,
                out_w,
                &mut col,
            );
            let dst =
                &mut out.data[item * c_out * out_h * out_w..(item + 1) * c_out * out_h * out_w];
            matmul(
                dst,
                &vw.data,
                &col,
                c_out,
                kk,
                out_h * out_w,
                false,
                false,
                S::ONE,
                S::ZERO,
            );
        }
        if let Some(bias) = b {
            let vb = self.value(bias);
            assert_eq!(vb.numel(), c_out);
            let plane = out_h * out_w;
            for item in 0..n {
                for c in 0..c_out {
                    let bv = vb.data[c];
                    let base = ((item * c_out) + c) * plane;
                    for v in &mut out.data[base..base + plane] {
                        *v += bv;
                    }
                }
            }
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
            },
        )
    }

    /// Transposed convolution; weight shape (C_in, C_out, k, k).
    /// Output size per axis: (in − 1)·stride − 2·pad + k + out_pad.
    #[allow(clippy::too_many_arguments)]
    pub fn deconv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let k = vw.shape.h;
        assert_eq!(vw.shape.w, k);
        assert_eq!(vw.shape.n, vx.shape.c, "deconv in-channel mismatch");
        let (n, c_in, h, w_in) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
        let c_out = vw.shape.c;
        let out_h = (h - 1) * stride + k + out_pad - 2 * pad;
        let out_w = (w_in - 1) * stride + k + out_pad - 2 * pad;
        debug_assert_eq!(conv_out_size(out_h, k, stride, pad), h);
        let kk = c_out * k * k;
        let mut out = Tensor::zeros(Shape::new(n, c_out, out_h, out_w));
        let mut col = vec![S::ZERO; kk * h * w_in];
        for item in 0..n {
            // col = Wᵀ · x, then scatter back through the adjoint of im2col
            matmul(
                &mut col,
                &vw.data,
                vx.batch_item(item),
                kk,
                c_in,
                h * w_in,
                true,
                false,
                S::ONE,
                S::ZERO,
            );
            let dst =
                &mut out.data[item * c_out * out_h * out_w..(item + 1) * c_out * out_h * out_w];
            col2im(&col, c_out, out_h, out_w, k, stride, pad, h, w_in, dst);
        }
        if let Some(bias) = b {
            let vb = self.value(bias);
            assert_eq!(vb.numel(), c_out);
            let plane = out_h * out_w;
            for item in 0..n {
                for c in 0..c_out {
                    let bv = vb.data[c];
                    let base = ((item * c_out) + c) * plane;
                    for v in &mut out.data[base..base + plane] {
                        *v += bv;
                    }
                }
            }
        }
        self.push(
            out,
            Op::Deconv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
            },
        )
    }

    /// Dense layer on row vectors: x (N, D), w (O, D), b (O,1,1,1).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        let n = vx.shape.n;
        let d = vx.numel() / n;
        let o = vw.shape.n;
        assert_eq!(vw.numel() / o, d, "linear dim mismatch");
        let mut out = Tensor::zeros(Shape::new(n, o, 1, 1));
        matmul(
            &mut out.data,
            &vx.data,
            &vw.data,
            n,
            d,
            o,
            false,
            true,
            S::ONE,
            S::ZERO,
        );
        if let Some(bias) = b {
            let vb = self.value(bias);
            assert_eq!(vb.numel(), o);
            for row in 0..n {
                for j in 0..o {
                    out.data[row * o + j] += vb.data[j];
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    /// Batch normalization using batch statistics. Returns the node plus the
    /// per-channel batch mean and (biased) variance for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Vec<S>, Vec<S>) {
        let vx = self.value(x);
        let (n, c, h, w) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
        let m = (n * h * w) as f64;
        let plane = h * w;
        let mut mean = vec![S::ZERO; c];
        let mut var = vec![S::ZERO; c];
        for ch in 0..c {
            let mut sum = S::ZERO;
            for item in 0..n {
                let base = (item * c + ch) * plane;
                for &v in &vx.data[base..base + plane] {
                    sum += v;
                }
            }
            mean[ch] = sum * S::from_f64(1.0 / m);
        }
        for ch in 0..c {
            let mu = mean[ch];
            let mut sum = S::ZERO;
            for item in 0..n {
                let base = (item * c + ch) * plane;
                for &v in &vx.data[base..base + plane] {
                    let d = v - mu;
                    sum += d * d;
                }
            }
            var[ch] = sum * S::from_f64(1.0 / m);
        }
        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::ONE / (v + S::from_f64(eps)).sqrt())
            .collect();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut out = Tensor::zeros(vx.shape);
        for item in 0..n {
            for ch in 0..c {
                let base = (item * c + ch) * plane;
                let (mu, is, g, be) = (mean[ch], inv_std[ch], vg.data[ch], vb.data[ch]);
                for i in base..base + plane {
                    out.data[i] = (vx.data[i] - mu) * is * g + be;
                }
            }
        }
        let node = self.push(
            out,
            Op::BnTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
        );
        (node, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> NodeId {
        let vx = self.value(x);
        let (n, c, h, w) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
        let plane = h * w;
        let inv_std: Vec<S> = running_var
            .iter()
            .map(|&v| S::ONE / (v + S::from_f64(eps)).sqrt())
            .collect();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut out = Tensor::zeros(vx.shape);
        for item in 0..n {
            for ch in 0..c {
                let base = (item * c + ch) * plane;
                let (mu, is, g, be) = (running_mean[ch], inv_std[ch], vg.data[ch], vb.data[ch]);
                for i in base..base + plane {
                    out.data[i] = (vx.data[i] - mu) * is * g + be;
                }
            }
        }
        self.push(
            out,
            Op::BnEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        )
    }

    /// Non-overlapping average pooling by an integer factor.
    pub fn avg_pool(&mut self, x: NodeId, factor: usize) -> NodeId {
        let vx = self.value(x);
        let (n, c, h, w) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
        assert!(h % factor == 0 && w % factor == 0, "pool size mismatch");
        let (oh, ow) = (h / factor, w / factor);
        let inv = S::from_f64(1.0 / (factor * factor) as f64);
        let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
        for item in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = S::ZERO;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                s += vx.at(item, ch, oy * factor + dy, ox * factor + dx);
                            }
                        }
                        let oi = out.idx(item, ch, oy, ox);
                        out.data[oi] = s * inv;
                    }
                }
            }
        }
        self.push(out, Op::AvgPool { x, factor })
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (n, c, h, w) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
        let mut out = Tensor::zeros(Shape::new(n, c, h * 2, w * 2));
        for item in 0..n {
            for ch in 0..c {
                for y in 0..h * 2 {
                    for x2 in 0..w * 2 {
                        let oi = out.idx(item, ch, y, x2);
                        out.data[oi] = vx.at(item, ch, y / 2, x2 / 2);
                    }
                }
            }
        }
        self.push(out, Op::UpsampleNearest2 { x })
    }

    /// Bilinear RoI pooling: one sample per output bin at the bin center.
    /// `coords` is a (P, 4) node of normalized (x0, y0, x1, y1) boxes;
    /// `batch_idx[p]` selects the feature batch item. Differentiable in both
    /// the features and the box coordinates.
    pub fn roi_align(
        &mut self,
        feat: NodeId,
        coords: NodeId,
        batch_idx: &[usize],
        out_size: usize,
    ) -> NodeId {
        let vf = self.value(feat);
        let vc = self.value(coords);
        let p_count = vc.shape.n;
        assert_eq!(vc.numel(), p_count * 4);
        assert_eq!(batch_idx.len(), p_count);
        let (c, fh, fw) = (vf.shape.c, vf.shape.h, vf.shape.w);
        let mut out = Tensor::zeros(Shape::new(p_count, c, out_size, out_size));
        for p in 0..p_count {
            let item = batch_idx[p];
            let bx0 = vc.data[p * 4].to_f64();
            let by0 = vc.data[p * 4 + 1].to_f64();
            let bx1 = vc.data[p * 4 + 2].to_f64();
            let by1 = vc.data[p * 4 + 3].to_f64();
            for gy in 0..out_size {
                for gx in 0..out_size {
                    let (sample, _) = bilinear_sample(
                        vf, item, c, fh, fw, bx0, by0, bx1, by1, gx, gy, out_size,
                    );
                    for ch in 0..c {
                        let oi = out.idx(p, ch, gy, gx);
                        out.data[oi] = sample.value(vf, item, ch);
                    }
                }
            }
        }
        self.push(
            out,
            Op::RoiAlign {
                feat,
                coords,
                batch_idx: batch_idx.to_vec(),
                out_size,
            },
        )
    }

    /// Back-projects a (N, 1, H, W) depth node into a (N, 3, H, W) point
    /// cloud through the inverse pinhole model, one set of intrinsics per
    /// batch item.
    pub fn point_cloud(&mut self, depth: NodeId, ks: &[CameraIntrinsics]) -> NodeId {
        let vd = self.value(depth);
        assert_eq!(vd.shape.c, 1);
        let (n, h, w) = (vd.shape.n, vd.shape.h, vd.shape.w);
        assert_eq!(ks.len(), n, "one intrinsics per batch item");
        let mut out = Tensor::zeros(Shape::new(n, 3, h, w));
        for (item, k) in ks.iter().enumerate() {
            for y in 0..h {
                let v = (y as f64 + 0.5) / h as f64;
                for x in 0..w {
                    let u = (x as f64 + 0.5) / w as f64;
                    let d = vd.at(item, 0, y, x);
                    let ox = out.idx(item, 0, y, x);
                    let oy = out.idx(item, 1, y, x);
                    let oz = out.idx(item, 2, y, x);
                    out.data[ox] = d * S::from_f64((u - k.cx) / k.fx);
                    out.data[oy] = d * S::from_f64((v - k.cy) / k.fy);
                    out.data[oz] = d;
                }
            }
        }
        self.push(out, Op::PointCloud { depth, ks: ks.to_vec() })
    }

    /// Mean absolute error against a constant target.
    pub fn l1_mean(&mut self, x: NodeId, target: Tensor<S>) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape, target.shape, "l1 target shape mismatch");
        let n = vx.numel() as f64;
        let mut sum = S::ZERO;
        for (a, b) in vx.data.iter().zip(&target.data) {
            sum += (*a - *b).abs();
        }
        let v = sum * S::from_f64(1.0 / n);
        self.push(Tensor::scalar(v), Op::L1Mean { x, target })
    }

    /// Softmax cross-entropy summed over rows of a (P, C) logits node.
    pub fn softmax_ce_sum(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let vl = self.value(logits);
        let p_count = vl.shape.n;
        let classes = vl.numel() / p_count;
        assert_eq!(labels.len(), p_count);
        let mut total = S::ZERO;
        for (p, &y) in labels.iter().enumerate() {
            let row = &vl.data[p * classes..(p + 1) * classes];
            let max = row.iter().fold(row[0], |m, &v| m.maximum(v));
            let mut lse = S::ZERO;
            for &z in row {
                lse += (z - max).exp();
            }
            total += lse.ln() + max - row[y];
        }
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxCeSum {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Binary cross-entropy on logits. With `per_row`, each leading-dim row
    /// is averaged over its own elements and the rows are summed; otherwise
    /// the mean is over all elements.
    pub fn bce_logits(&mut self, logits: NodeId, target: Tensor<S>, per_row: bool) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.shape, target.shape);
        let rows = vl.shape.n;
        let row_len = vl.numel() / rows.max(1);
        let mut total = S::ZERO;
        for r in 0..rows {
            let mut row_sum = S::ZERO;
            for i in r * row_len..(r + 1) * row_len {
                let z = vl.data[i];
                let t = target.data[i];
                row_sum += z.maximum(S::ZERO) - z * t + (S::ONE + (-z.abs()).exp()).ln();
            }
            total += if per_row {
                row_sum * S::from_f64(1.0 / row_len as f64)
            } else {
                row_sum
            };
        }
        if !per_row {
            total *= S::from_f64(1.0 / (rows * row_len).max(1) as f64);
        }
        self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                logits,
                target,
                per_row,
            },
        )
    }

    /// Smooth-L1 (Huber) loss summed over all elements.
    pub fn smooth_l1_sum(&mut self, pred: NodeId, target: Tensor<S>, beta: f64) -> NodeId {
        let vp = self.value(pred);
        assert_eq!(vp.shape, target.shape);
        let b = S::from_f64(beta);
        let half = S::from_f64(0.5);
        let mut total = S::ZERO;
        for (a, t) in vp.data.iter().zip(&target.data) {
            let d = (*a - *t).abs();
            total += if d < b {
                half * d * d / b
            } else {
                d - half * b
            };
        }
        self.push(
            Tensor::scalar(total),
            Op::SmoothL1Sum {
                pred,
                target,
                beta: b,
            },
        )
    }

    /// Volume regression loss summed over rows: for each row,
    /// |v − v*| / max(v*, eps) + alpha·|v − v*| (all in liters).
    pub fn volume_loss_sum(
        &mut self,
        v: NodeId,
        v_star: &[S],
        alpha: f64,
        eps: f64,
    ) -> NodeId {
        let vv = self.value(v);
        assert_eq!(vv.numel(), v_star.len());
        let a = S::from_f64(alpha);
        let e = S::from_f64(eps);
        let mut total = S::ZERO;
        for (p, &target) in v_star.iter().enumerate() {
            let diff = (vv.data[p] - target).abs();
            total += diff / target.maximum(e) + a * diff;
        }
        self.push(
            Tensor::scalar(total),
            Op::VolumeLossSum {
                v,
                v_star: v_star.to_vec(),
                alpha: a,
                eps: e,
            },
        )
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Gradients<S> {
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(root).numel(), 1, "backward from non-scalar");
        grads[root.0] = Some(Tensor::scalar(S::ONE));
        for i in (0..=root.0).rev() {
            let Some(g_out) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g_out, &mut grads);
            grads[i] = Some(g_out);
        }
        Gradients { grads }
    }

    /// Harvest parameter gradients into a per-parameter map.
    pub fn param_grads(&self, grads: &Gradients<S>, store: &ParamStore<S>) -> Vec<Option<Tensor<S>>> {
        let mut out: Vec<Option<Tensor<S>>> = vec![None; store.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = grads.grads[i].as_ref() {
                    match &mut out[pid.0] {
                        Some(acc) => acc.add_assign(g),
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g_out: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let acc = |grads: &mut [Option<Tensor<S>>], id: NodeId, add: Tensor<S>| {
            match &mut grads[id.0] {
                Some(g) => g.add_assign(&add),
                slot => *slot = Some(add),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Relu { x } => {
                let vx = self.value(*x);
                let data = vx
                    .data
                    .iter()
                    .zip(&g_out.data)
                    .map(|(&v, &g)| if v > S::ZERO { g } else { S::ZERO })
                    .collect();
                acc(grads, *x, Tensor::from_vec(vx.shape, data));
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let data = y
                    .data
                    .iter()
                    .zip(&g_out.data)
                    .map(|(&s, &g)| g * s * (S::ONE - s))
                    .collect();
                acc(grads, *x, Tensor::from_vec(y.shape, data));
            }
            Op::Add { a, b } => {
                acc(grads, *a, g_out.clone());
                acc(grads, *b, g_out.clone());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = vb
                    .data
                    .iter()
                    .zip(&g_out.data)
                    .map(|(&v, &g)| v * g)
                    .collect();
                let db = va
                    .data
                    .iter()
                    .zip(&g_out.data)
                    .map(|(&v, &g)| v * g)
                    .collect();
                acc(grads, *a, Tensor::from_vec(va.shape, da));
                acc(grads, *b, Tensor::from_vec(vb.shape, db));
            }
            Op::Scale { x, k } => {
                acc(grads, *x, g_out.map(|g| g * *k));
            }
            Op::SumScalars { xs } => {
                for &x in xs {
                    acc(grads, x, Tensor::scalar(g_out.item()));
                }
            }
            Op::ConcatChannels { parts } => {
                let out_shape = self.nodes[i].value.shape;
                let plane = out_shape.h * out_shape.w;
                let mut c_off = 0;
                for &p in parts {
                    let vp_shape = self.value(p).shape;
                    let mut gp = Tensor::zeros(vp_shape);
                    for n in 0..out_shape.n {
                        let src_base = (n * out_shape.c + c_off) * plane;
                        let dst_base = n * vp_shape.c * plane;
                        gp.data[dst_base..dst_base + vp_shape.c * plane].copy_from_slice(
                            &g_out.data[src_base..src_base + vp_shape.c * plane],
                        );
                    }
                    c_off += vp_shape.c;
                    acc(grads, p, gp);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let vp_shape = self.value(p).shape;
                    let len = vp_shape.numel();
                    let gp = Tensor::from_vec(
                        vp_shape,
                        g_out.data[offset..offset + len].to_vec(),
                    );
                    offset += len;
                    acc(grads, p, gp);
                }
            }
            Op::GatherRows { x, rows } => {
                let vx_shape = self.value(*x).shape;
                let row_len = vx_shape.c * vx_shape.h * vx_shape.w;
                let mut gx = Tensor::zeros(vx_shape);
                for (i_row, &r) in rows.iter().enumerate() {
                    for j in 0..row_len {
                        gx.data[r * row_len + j] += g_out.data[i_row * row_len + j];
                    }
                }
                acc(grads, *x, gx);
            }
            Op::GatherElems { x, idx } => {
                let vx_shape = self.value(*x).shape;
                let mut gx = Tensor::zeros(vx_shape);
                for (i, &src) in idx.iter().enumerate() {
                    gx.data[src] += g_out.data[i];
                }
                acc(grads, *x, gx);
            }
            Op::GatherChannel { x, idx } => {
                let vx_shape = self.value(*x).shape;
                let plane = vx_shape.h * vx_shape.w;
                let mut gx = Tensor::zeros(vx_shape);
                for (p, &c) in idx.iter().enumerate() {
                    let base = ((p * vx_shape.c) + c) * plane;
                    for j in 0..plane {
                        gx.data[base + j] += g_out.data[p * plane + j];
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, c_in, h, w_in) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
                let c_out = vw.shape.n;
                let out_shape = self.nodes[i].value.shape;
                let (out_h, out_w) = (out_shape.h, out_shape.w);
                let kk = c_in * k * k;
                let mut gx = Tensor::zeros(vx.shape);
                let mut gw = Tensor::zeros(vw.shape);
                let mut col = vec![S::ZERO; kk * out_h * out_w];
                let mut dcol = vec![S::ZERO; kk * out_h * out_w];
                for item in 0..n {
                    let g_item = &g_out.data
                        [item * c_out * out_h * out_w..(item + 1) * c_out * out_h * out_w];
                    // dW += g · colᵀ
                    im2col(
                        vx.batch_item(item),
                        c_in,
                        h,
                        w_in,
                        *k,
                        *stride,
                        *pad,
                        out_h,
                        out_w,
                        &mut col,
                    );
                    matmul(
                        &mut gw.data,
                        g_item,
                        &col,
                        c_out,
                        out_h * out_w,
                        kk,
                        false,
                        true,
                        S::ONE,
                        S::ONE,
                    );
                    // dX = col2im(Wᵀ · g)
                    matmul(
                        &mut dcol,
                        &vw.data,
                        g_item,
                        kk,
                        c_out,
                        out_h * out_w,
                        true,
                        false,
                        S::ONE,
                        S::ZERO,
                    );
                    let gx_item = &mut gx.data
                        [item * c_in * h * w_in..(item + 1) * c_in * h * w_in];
                    col2im(
                        &dcol, c_in, h, w_in, *k, *stride, *pad, out_h, out_w, gx_item,
                    );
                }
                if let Some(bias) = b {
                    let mut gb = Tensor::zeros(self.value(*bias).shape);
                    let plane = out_h * out_w;
                    for item in 0..n {
                        for c in 0..c_out {
                            let base = (item * c_out + c) * plane;
                            let mut s = S::ZERO;
                            for &g in &g_out.data[base..base + plane] {
                                s += g;
                            }
                            gb.data[c] += s;
                        }
                    }
                    acc(grads, *bias, gb);
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
            Op::Deconv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, c_in, h, w_in) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
                let c_out = vw.shape.c;
                let out_shape = self.nodes[i].value.shape;
                let (out_h, out_w) = (out_shape.h, out_shape.w);
                let kk = c_out * k * k;
                let mut gx = Tensor::zeros(vx.shape);
                let mut gw = Tensor::zeros(vw.shape);
                let mut col = vec![S::ZERO; kk * h * w_in];
                for item in 0..n {
                    let g_item = &g_out.data
                        [item * c_out * out_h * out_w..(item + 1) * c_out * out_h * out_w];
                    im2col(
                        g_item, c_out, out_h, out_w, *k, *stride, *pad, h, w_in, &mut col,
                    );
                    // dX = W · im2col(g)
                    let gx_item =
                        &mut gx.data[item * c_in * h * w_in..(item + 1) * c_in * h * w_in];
                    matmul(
                        gx_item,
                        &vw.data,
                        &col,
                        c_in,
                        kk,
                        h * w_in,
                        false,
                        false,
                        S::ONE,
                        S::ZERO,
                    );
                    // dW += x · im2col(g)ᵀ
                    matmul(
                        &mut gw.data,
                        vx.batch_item(item),
                        &col,
                        c_in,
                        h * w_in,
                        kk,
                        false,
                        true,
                        S::ONE,
                        S::ONE,
                    );
                }
                if let Some(bias) = b {
                    let mut gb = Tensor::zeros(self.value(*bias).shape);
                    let plane = out_h * out_w;
                    for item in 0..n {
                        for c in 0..c_out {
                            let base = (item * c_out + c) * plane;
                            let mut s = S::ZERO;
                            for &g in &g_out.data[base..base + plane] {
                                s += g;
                            }
                            gb.data[c] += s;
                        }
                    }
                    acc(grads, *bias, gb);
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let n = vx.shape.n;
                let d = vx.numel() / n;
                let o = vw.shape.n;
                let mut gx = Tensor::zeros(vx.shape);
                let mut gw = Tensor::zeros(vw.shape);
                // dX = g · W
                matmul(
                    &mut gx.data,
                    &g_out.data,
                    &vw.data,
                    n,
                    o,
                    d,
                    false,
                    false,
                    S::ONE,
                    S::ZERO,
                );
                // dW = gᵀ · X
                matmul(
                    &mut gw.data,
                    &g_out.data,
                    &vx.data,
                    o,
                    n,
                    d,
                    true,
                    false,
                    S::ONE,
                    S::ZERO,
                );
                if let Some(bias) = b {
                    let mut gb = Tensor::zeros(self.value(*bias).shape);
                    for row in 0..n {
                        for j in 0..o {
                            gb.data[j] += g_out.data[row * o + j];
                        }
                    }
                    acc(grads, *bias, gb);
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let (n, c, h, w) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
                let plane = h * w;
                let m = S::from_f64((n * h * w) as f64);
                let mut gx = Tensor::zeros(vx.shape);
                let mut gg = Tensor::zeros(vg.shape);
                let mut gb = Tensor::zeros(self.value(*beta).shape);
                for ch in 0..c {
                    let (mu, istd, g_ch) = (mean[ch], inv_std[ch], vg.data[ch]);
                    let mut sum_dy = S::ZERO;
                    let mut sum_dy_xhat = S::ZERO;
                    for item in 0..n {
                        let base = (item * c + ch) * plane;
                        for j in base..base + plane {
                            let xhat = (vx.data[j] - mu) * istd;
                            let dy = g_out.data[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    gg.data[ch] += sum_dy_xhat;
                    gb.data[ch] += sum_dy;
                    let k1 = g_ch * istd / m;
                    for item in 0..n {
                        let base = (item * c + ch) * plane;
                        for j in base..base + plane {
                            let xhat = (vx.data[j] - mu) * istd;
                            gx.data[j] +=
                                k1 * (m * g_out.data[j] - sum_dy - xhat * sum_dy_xhat);
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let (n, c, h, w) = (vx.shape.n, vx.shape.c, vx.shape.h, vx.shape.w);
                let plane = h * w;
                let mut gx = Tensor::zeros(vx.shape);
                let mut gg = Tensor::zeros(vg.shape);
                let mut gb = Tensor::zeros(self.value(*beta).shape);
                for ch in 0..c {
                    let (mu, istd, g_ch) = (mean[ch], inv_std[ch], vg.data[ch]);
                    for item in 0..n {
                        let base = (item * c + ch) * plane;
                        for j in base..base + plane {
                            let dy = g_out.data[j];
                            gx.data[j] += dy * g_ch * istd;
                            gg.data[ch] += dy * (vx.data[j] - mu) * istd;
                            gb.data[ch] += dy;
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::AvgPool { x, factor } => {
                let vx_shape = self.value(*x).shape;
                let (n, c) = (vx_shape.n, vx_shape.c);
                let (oh, ow) = (vx_shape.h / factor, vx_shape.w / factor);
                let inv = S::from_f64(1.0 / (factor * factor) as f64);
                let mut gx = Tensor::zeros(vx_shape);
                for item in 0..n {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = g_out.data
                                    [((item * c + ch) * oh + oy) * ow + ox]
                                    * inv;
                                for dy in 0..*factor {
                                    for dx in 0..*factor {
                                        let gi = gx.idx(
                                            item,
                                            ch,
                                            oy * factor + dy,
                                            ox * factor + dx,
                                        );
                                        gx.data[gi] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::UpsampleNearest2 { x } => {
                let vx_shape = self.value(*x).shape;
                let (n, c, h, w) = (vx_shape.n, vx_shape.c, vx_shape.h, vx_shape.w);
                let mut gx = Tensor::zeros(vx_shape);
                for item in 0..n {
                    for ch in 0..c {
                        for y in 0..h * 2 {
                            for x2 in 0..w * 2 {
                                let gi = gx.idx(item, ch, y / 2, x2 / 2);
                                gx.data[gi] +=
                                    g_out.data[((item * c + ch) * h * 2 + y) * w * 2 + x2];
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::RoiAlign {
                feat,
                coords,
                batch_idx,
                out_size,
            } => {
                let vf = self.value(*feat);
                let vc = self.value(*coords);
                let (c, fh, fw) = (vf.shape.c, vf.shape.h, vf.shape.w);
                let mut gf = Tensor::zeros(vf.shape);
                let mut gc = Tensor::zeros(vc.shape);
                for (p, &item) in batch_idx.iter().enumerate() {
                    let bx0 = vc.data[p * 4].to_f64();
                    let by0 = vc.data[p * 4 + 1].to_f64();
                    let bx1 = vc.data[p * 4 + 2].to_f64();
                    let by1 = vc.data[p * 4 + 3].to_f64();
                    for gy in 0..*out_size {
                        for gx_bin in 0..*out_size {
                            let (sample, dcoord) = bilinear_sample(
                                vf, item, c, fh, fw, bx0, by0, bx1, by1, gx_bin, gy, *out_size,
                            );
                            for ch in 0..c {
                                let g =
                                    g_out.data[((p * c + ch) * out_size + gy) * out_size + gx_bin];
                                sample.scatter(&mut gf, item, ch, g);
                                let (dx, dy) = sample.coord_grad(vf, item, ch);
                                gc.data[p * 4] += g * S::from_f64(dx * dcoord.du_dx0);
                                gc.data[p * 4 + 2] += g * S::from_f64(dx * dcoord.du_dx1);
                                gc.data[p * 4 + 1] += g * S::from_f64(dy * dcoord.dv_dy0);
                                gc.data[p * 4 + 3] += g * S::from_f64(dy * dcoord.dv_dy1);
                            }
                        }
                    }
                }
                acc(grads, *feat, gf);
                acc(grads, *coords, gc);
            }
            Op::PointCloud { depth, ks } => {
                let vd_shape = self.value(*depth).shape;
                let (_n, h, w) = (vd_shape.n, vd_shape.h, vd_shape.w);
                let mut gd = Tensor::zeros(vd_shape);
                let plane = h * w;
                for (item, k) in ks.iter().enumerate() {
                    for y in 0..h {
                        let v = (y as f64 + 0.5) / h as f64;
                        for x in 0..w {
                            let u = (x as f64 + 0.5) / w as f64;
                            let base = item * 3 * plane + y * w + x;
                            let gx = g_out.data[base];
                            let gy = g_out.data[base + plane];
                            let gz = g_out.data[base + 2 * plane];
                            let gi = item * plane + y * w + x;
                            gd.data[gi] += gx * S::from_f64((u - k.cx) / k.fx)
                                + gy * S::from_f64((v - k.cy) / k.fy)
                                + gz;
                        }
                    }
                }
                acc(grads, *depth, gd);
            }
            Op::L1Mean { x, target } => {
                let vx = self.value(*x);
                let inv = S::from_f64(1.0 / vx.numel() as f64) * g_out.item();
                let data = vx
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(&a, &t)| {
                        if a > t {
                            inv
                        } else if a < t {
                            -inv
                        } else {
                            S::ZERO
                        }
                    })
                    .collect();
                acc(grads, *x, Tensor::from_vec(vx.shape, data));
            }
            Op::SoftmaxCeSum { logits, labels } => {
                let vl = self.value(*logits);
                let p_count = vl.shape.n;
                let classes = vl.numel() / p_count;
                let g = g_out.item();
                let mut gl = Tensor::zeros(vl.shape);
                for (p, &y) in labels.iter().enumerate() {
                    let row = &vl.data[p * classes..(p + 1) * classes];
                    let max = row.iter().fold(row[0], |m, &v| m.maximum(v));
                    let mut denom = S::ZERO;
                    for &z in row {
                        denom += (z - max).exp();
                    }
                    for j in 0..classes {
                        let softmax = (row[j] - max).exp() / denom;
                        let indicator = if j == y { S::ONE } else { S::ZERO };
                        gl.data[p * classes + j] = (softmax - indicator) * g;
                    }
                }
                acc(grads, *logits, gl);
            }
            Op::BceLogits {
                logits,
                target,
                per_row,
            } => {
                let vl = self.value(*logits);
                let rows = vl.shape.n;
                let row_len = vl.numel() / rows.max(1);
                let g = g_out.item();
                let mut gl = Tensor::zeros(vl.shape);
                let scale = if *per_row {
                    S::from_f64(1.0 / row_len as f64)
                } else {
                    S::from_f64(1.0 / (rows * row_len).max(1) as f64)
                };
                for i_el in 0..vl.numel() {
                    let z = vl.data[i_el];
                    let sig = S::ONE / (S::ONE + (-z).exp());
                    gl.data[i_el] = (sig - target.data[i_el]) * scale * g;
                }
                acc(grads, *logits, gl);
            }
            Op::SmoothL1Sum { pred, target, beta } => {
                let vp = self.value(*pred);
                let g = g_out.item();
                let data = vp
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(&a, &t)| {
                        let d = a - t;
                        let slope = if d.abs() < *beta {
                            d / *beta
                        } else if d > S::ZERO {
                            S::ONE
                        } else {
                            -S::ONE
                        };
                        slope * g
                    })
                    .collect();
                acc(grads, *pred, Tensor::from_vec(vp.shape, data));
            }
            Op::VolumeLossSum {
                v,
                v_star,
                alpha,
                eps,
            } => {
                let vv = self.value(*v);
                let g = g_out.item();
                let mut gv = Tensor::zeros(vv.shape);
                for (p, &target) in v_star.iter().enumerate() {
                    let r = vv.data[p] - target;
                    let sign = if r > S::ZERO {
                        S::ONE
                    } else if r < S::ZERO {
                        -S::ONE
                    } else {
                        S::ZERO
                    };
                    gv.data[p] = sign * (S::ONE / target.maximum(*eps) + *alpha) * g;
                }
                acc(grads, *v, gv);
            }
        }
    }
}

/// One bilinear sample: integer corners plus fractional weights, with the
/// chain-rule factors from bin-center position back to box coordinates.
struct BilinearSample {
    x_low: usize,
    y_low: usize,
    lx: f64,
    ly: f64,
    clamped_x: bool,
    clamped_y: bool,
}

struct CoordChain {
    du_dx0: f64,
    du_dx1: f64,
    dv_dy0: f64,
    dv_dy1: f64,
}

#[allow(clippy::too_many_arguments)]
fn bilinear_sample<S: Scalar>(
    _feat: &Tensor<S>,
    _item: usize,
    _c: usize,
    fh: usize,
    fw: usize,
    bx0: f64,
    by0: f64,
    bx1: f64,
    by1: f64,
    gx: usize,
    gy: usize,
    out_size: usize,
) -> (BilinearSample, CoordChain) {
    let tx = (gx as f64 + 0.5) / out_size as f64;
    let ty = (gy as f64 + 0.5) / out_size as f64;
    let u = bx0 + tx * (bx1 - bx0);
    let v = by0 + ty * (by1 - by0);
    // continuous feature coordinates of the sample point
    let fx_raw = u * fw as f64 - 0.5;
    let fy_raw = v * fh as f64 - 0.5;
    let fx = fx_raw.clamp(0.0, (fw - 1) as f64);
    let fy = fy_raw.clamp(0.0, (fh - 1) as f64);
    let clamped_x = fx != fx_raw;
    let clamped_y = fy != fy_raw;
    let x_low = (fx.floor() as usize).min(fw.saturating_sub(2));
    let y_low = (fy.floor() as usize).min(fh.saturating_sub(2));
    let lx = if fw > 1 { fx - x_low as f64 } else { 0.0 };
    let ly = if fh > 1 { fy - y_low as f64 } else { 0.0 };
    (
        BilinearSample {
            x_low,
            y_low,
            lx,
            ly,
            clamped_x,
            clamped_y,
        },
        CoordChain {
            du_dx0: (1.0 - tx) * fw as f64,
            du_dx1: tx * fw as f64,
            dv_dy0: (1.0 - ty) * fh as f64,
            dv_dy1: ty * fh as f64,
        },
    )
}

impl BilinearSample {
    fn corners(&self, fh: usize, fw: usize) -> [(usize, usize, f64); 4] {
        let x_hi = (self.x_low + 1).min(fw - 1);
        let y_hi = (self.y_low + 1).min(fh - 1);
        [
            (self.x_low, self.y_low, (1.0 - self.lx) * (1.0 - self.ly)),
            (x_hi, self.y_low, self.lx * (1.0 - self.ly)),
            (self.x_low, y_hi, (1.0 - self.lx) * self.ly),
            (x_hi, y_hi, self.lx * self.ly),
        ]
    }

    fn value<S: Scalar>(&self, feat: &Tensor<S>, item: usize, ch: usize) -> S {
        let (fh, fw) = (feat.shape.h, feat.shape.w);
        let mut v = S::ZERO;
        for (x, y, w) in self.corners(fh, fw) {
            v += feat.at(item, ch, y, x) * S::from_f64(w);
        }
        v
    }

    fn scatter<S: Scalar>(&self, gf: &mut Tensor<S>, item: usize, ch: usize, g: S) {
        let (fh, fw) = (gf.shape.h, gf.shape.w);
        for (x, y, w) in self.corners(fh, fw) {
            let gi = gf.idx(item, ch, y, x);
            gf.data[gi] += g * S::from_f64(w);
        }
    }

    /// d(sample)/d(fx), d(sample)/d(fy) for one channel; zero where clamped.
    fn coord_grad<S: Scalar>(&self, feat: &Tensor<S>, item: usize, ch: usize) -> (f64, f64) {
        let (fh, fw) = (feat.shape.h, feat.shape.w);
        let x_hi = (self.x_low + 1).min(fw - 1);
        let y_hi = (self.y_low + 1).min(fh - 1);
        let v00 = feat.at(item, ch, self.y_low, self.x_low).to_f64();
        let v10 = feat.at(item, ch, self.y_low, x_hi).to_f64();
        let v01 = feat.at(item, ch, y_hi, self.x_low).to_f64();
        let v11 = feat.at(item, ch, y_hi, x_hi).to_f64();
        let dx = if self.clamped_x {
            0.0
        } else {
            (v10 - v00) * (1.0 - self.ly) + (v11 - v01) * self.ly
        };
        let dy = if self.clamped_y {
            0.0
        } else {
            (v01 - v00) * (1.0 - self.lx) + (v11 - v10) * self.lx
        };
        (dx, dy)
    }
}
