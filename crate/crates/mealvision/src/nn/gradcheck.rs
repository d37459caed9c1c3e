//! Central finite-difference utilities used to verify backward rules.

/// Numeric gradient of a scalar function at `x` by central differences.
pub fn central_diff_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Worst-case relative error between analytic and numeric gradients, with a
/// denominator floor so near-zero entries compare absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::nn::{ParamKind, ParamStore, Shape, Tape, Tensor};
    use crate::rng::Rng;

    /// Checks the gradient of `build` (a scalar-valued tape program over one
    /// flat input) against central differences.
    fn check(
        name: &str,
        x: &[f64],
        shape: Shape,
        tol: f64,
        build: &dyn Fn(&mut Tape<f64>, crate::nn::NodeId) -> crate::nn::NodeId,
    ) {
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::from_vec(shape, x.to_vec()));
        let out = build(&mut tape, input);
        let grads = tape.backward(out);
        let analytic = grads.get(input).expect("input grad").data.clone();
        let mut f = |probe: &[f64]| {
            let mut t = Tape::new();
            let inp = t.leaf(Tensor::from_vec(shape, probe.to_vec()));
            let o = build(&mut t, inp);
            t.value(o).item()
        };
        let numeric = central_diff_gradient(&mut f, x, 1e-5);
        let err = max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < tol, "{name}: max rel err {err}");
    }

    fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn relu_sigmoid_add_mul_scale() {
        let mut rng = Rng::seed_from_u64(1);
        let shape = Shape::new(2, 3, 4, 4);
        let x = randn(&mut rng, shape.numel());
        let other = Tensor::from_vec(shape, randn(&mut rng, shape.numel()));
        check("relu+mix", &x, shape, 1e-6, &move |t, inp| {
            let o = t.leaf(other.clone());
            let r = t.relu(inp);
            let s = t.sigmoid(inp);
            let a = t.add(r, s);
            let m = t.mul(a, o);
            let sc = t.scale(m, 0.7);
            let target = Tensor::zeros(shape);
            t.l1_mean(sc, target)
        });
    }

    #[test]
    fn conv2d_grads() {
        let mut rng = Rng::seed_from_u64(2);
        let xs = Shape::new(2, 3, 6, 6);
        let ws = Shape::new(4, 3, 3, 3);
        let x = randn(&mut rng, xs.numel());
        let w = randn(&mut rng, ws.numel());
        let b = randn(&mut rng, 4);
        // check input gradient
        let (wc, bc) = (w.clone(), b.clone());
        check("conv2d/x", &x, xs, 1e-6, &move |t, inp| {
            let wn = t.leaf(Tensor::from_vec(ws, wc.clone()));
            let bn = t.leaf(Tensor::from_vec(Shape::new(4, 1, 1, 1), bc.clone()));
            let y = t.conv2d(inp, wn, Some(bn), 2, 1);
            let target = Tensor::zeros(t.value(y).shape);
            t.l1_mean(y, target)
        });
        // check weight gradient
        let xc = x.clone();
        check("conv2d/w", &w, ws, 1e-6, &move |t, inp| {
            let xn = t.leaf(Tensor::from_vec(xs, xc.clone()));
            let y = t.conv2d(xn, inp, None, 1, 1);
            let target = Tensor::zeros(t.value(y).shape);
            t.l1_mean(y, target)
        });
    }

    #[test]
    fn deconv2d_grads() {
        let mut rng = Rng::seed_from_u64(3);
        let xs = Shape::new(1, 4, 5, 5);
        let ws = Shape::new(4, 3, 3, 3); // (C_in, C_out, k, k)
        let x = randn(&mut rng, xs.numel());
        let w = randn(&mut rng, ws.numel());
        let wc = w.clone();
        check("deconv2d/x", &x, xs, 1e-6, &move |t, inp| {
            let wn = t.leaf(Tensor::from_vec(ws, wc.clone()));
            let y = t.deconv2d(inp, wn, None, 2, 1, 1);
            assert_eq!(t.value(y).shape.h, 10);
            let target = Tensor::zeros(t.value(y).shape);
            t.l1_mean(y, target)
        });
        let xc = x.clone();
        check("deconv2d/w", &w, ws, 1e-6, &move |t, inp| {
            let xn = t.leaf(Tensor::from_vec(xs, xc.clone()));
            let y = t.deconv2d(xn, inp, None, 2, 1, 1);
            let target = Tensor::zeros(t.value(y).shape);
            t.l1_mean(y, target)
        });
    }

    #[test]
    fn linear_grads() {
        let mut rng = Rng::seed_from_u64(4);
        let xs = Shape::new(3, 5, 1, 1);
        let ws = Shape::new(2, 5, 1, 1);
        let x = randn(&mut rng, xs.numel());
        let w = randn(&mut rng, ws.numel());
        let wc = w.clone();
        check("linear/x", &x, xs, 1e-6, &move |t, inp| {
            let wn = t.leaf(Tensor::from_vec(ws, wc.clone()));
            let y = t.linear(inp, wn, None);
            let target = Tensor::filled(t.value(y).shape, 0.3);
            t.l1_mean(y, target)
        });
        let xc = x.clone();
        check("linear/w", &w, ws, 1e-6, &move |t, inp| {
            let xn = t.leaf(Tensor::from_vec(xs, xc.clone()));
            let y = t.linear(xn, inp, None);
            let target = Tensor::filled(t.value(y).shape, 0.3);
            t.l1_mean(y, target)
        });
    }

    #[test]
    fn batch_norm_train_grads() {
        let mut rng = Rng::seed_from_u64(5);
        let xs = Shape::new(2, 3, 4, 4);
        let x = randn(&mut rng, xs.numel());
        let gamma = randn(&mut rng, 3);
        let beta = randn(&mut rng, 3);
        let (gc, bc) = (gamma.clone(), beta.clone());
        check("bn/x", &x, xs, 1e-5, &move |t, inp| {
            let g = t.leaf(Tensor::from_vec(Shape::new(3, 1, 1, 1), gc.clone()));
            let b = t.leaf(Tensor::from_vec(Shape::new(3, 1, 1, 1), bc.clone()));
            let (y, _, _) = t.batch_norm_train(inp, g, b, 1e-5);
            let target = Tensor::zeros(xs);
            t.l1_mean(y, target)
        });
        let (xc, bc2) = (x.clone(), beta.clone());
        check("bn/gamma", &gamma, Shape::new(3, 1, 1, 1), 1e-5, &move |t, inp| {
            let xn = t.leaf(Tensor::from_vec(xs, xc.clone()));
            let b = t.leaf(Tensor::from_vec(Shape::new(3, 1, 1, 1), bc2.clone()));
            let (y, _, _) = t.batch_norm_train(xn, inp, b, 1e-5);
            let target = Tensor::zeros(xs);
            t.l1_mean(y, target)
        });
    }

    #[test]
    fn pool_upsample_concat_gather_grads() {
        let mut rng = Rng::seed_from_u64(6);
        let xs = Shape::new(2, 2, 4, 4);
        let x = randn(&mut rng, xs.numel());
        check("pool+up+concat+gather", &x, xs, 1e-6, &move |t, inp| {
            let pooled = t.avg_pool(inp, 2);
            let up = t.upsample_nearest2(pooled);
            let cat = t.concat_channels(&[inp, up]);
            let rows = t.gather_rows(cat, &[1, 0, 1]);
            let chan = t.gather_channel(rows, &[0, 3, 2]);
            // target far outside the activation range keeps the |·| kink
            // away from the finite-difference probes
            let target = Tensor::filled(t.value(chan).shape, 25.0);
            t.l1_mean(chan, target)
        });
    }

    #[test]
    fn roi_align_grads_features_and_coords() {
        let mut rng = Rng::seed_from_u64(7);
        let fs = Shape::new(2, 3, 8, 8);
        let feat = randn(&mut rng, fs.numel());
        // boxes chosen so samples avoid exact lattice points
        let coords = vec![0.13, 0.21, 0.77, 0.69, 0.05, 0.11, 0.52, 0.93];
        let cs = Shape::new(2, 4, 1, 1);
        let cc = coords.clone();
        check("roi_align/feat", &feat, fs, 1e-5, &move |t, inp| {
            let c = t.leaf(Tensor::from_vec(cs, cc.clone()));
            let p = t.roi_align(inp, c, &[0, 1], 5);
            let target = Tensor::zeros(t.value(p).shape);
            t.l1_mean(p, target)
        });
        let fc = feat.clone();
        check("roi_align/coords", &coords, cs, 1e-4, &move |t, inp| {
            let f = t.leaf(Tensor::from_vec(fs, fc.clone()));
            let p = t.roi_align(f, inp, &[0, 1], 5);
            let target = Tensor::zeros(t.value(p).shape);
            t.l1_mean(p, target)
        });
    }

    #[test]
    fn point_cloud_grads() {
        let mut rng = Rng::seed_from_u64(8);
        let ds = Shape::new(1, 1, 6, 6);
        let d: Vec<f64> = (0..36).map(|_| rng.range(0.2, 0.8)).collect();
        let k = CameraIntrinsics {
            fx: 1.1,
            fy: 0.9,
            cx: 0.45,
            cy: 0.55,
        };
        check("point_cloud", &d, ds, 1e-6, &move |t, inp| {
            let cloud = t.point_cloud(inp, &[k]);
            let target = Tensor::filled(t.value(cloud).shape, 0.05);
            t.l1_mean(cloud, target)
        });
    }

    #[test]
    fn loss_op_grads() {
        let mut rng = Rng::seed_from_u64(9);
        let ls = Shape::new(3, 5, 1, 1);
        let logits = randn(&mut rng, ls.numel());
        check("softmax_ce", &logits, ls, 1e-5, &move |t, inp| {
            t.softmax_ce_sum(inp, &[2, 0, 4])
        });

        let bs = Shape::new(2, 1, 3, 3);
        let blogits = randn(&mut rng, bs.numel());
        let targets = Tensor::from_vec(
            bs,
            (0..bs.numel())
                .map(|_| if rng.chance(0.5) { 1.0 } else { 0.0 })
                .collect(),
        );
        let tc = targets.clone();
        check("bce_per_row", &blogits, bs, 1e-5, &move |t, inp| {
            t.bce_logits(inp, tc.clone(), true)
        });

        let ss = Shape::new(4, 4, 1, 1);
        let pred = randn(&mut rng, ss.numel());
        let target = Tensor::from_vec(ss, randn(&mut rng, ss.numel()));
        let tc2 = target.clone();
        check("smooth_l1", &pred, ss, 1e-4, &move |t, inp| {
            t.smooth_l1_sum(inp, tc2.clone(), 1.0)
        });

        let vs = Shape::new(3, 1, 1, 1);
        let v = vec![0.05, 0.11, 0.02];
        check("volume_loss", &v, vs, 1e-5, &move |t, inp| {
            t.volume_loss_sum(inp, &[0.04, 0.12, 0.03], 0.01, 1e-6)
        });
    }

    #[test]
    fn param_grads_accumulate_across_uses() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add(
            "w",
            Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.3, -0.4]),
            ParamKind::Weight,
        );
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let doubled = tape.add(wn, wn);
        let wn2 = tape.param(&store, w); // second use as a fresh leaf
        let sum = tape.add(doubled, wn2);
        let target = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let loss = tape.l1_mean(sum, target);
        let grads = tape.backward(loss);
        let pg = tape.param_grads(&grads, &store);
        let g = pg[0].as_ref().unwrap();
        // d/dw of mean|3w| = 1.5·sign per element
        assert!((g.data[0] - 1.5).abs() < 1e-12);
        assert!((g.data[1] + 1.5).abs() < 1e-12);
    }
}
