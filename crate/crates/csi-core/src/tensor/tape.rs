//! Record-and-replay reverse-mode differentiation.
//!
//! A [`Tape`] records primitive operations in topological order; `backward`
//! walks them in exact reverse order, accumulating gradients into per-node
//! buffers. Tapes are confined to one thread; independent tapes can run in
//! parallel on disjoint data.

use std::cell::{Ref, RefCell};

use rand::Rng;

use super::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    val: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, val: Tensor, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { val, parents, back });
        self.grads.borrow_mut().push(None);
        Var(nodes.len() - 1)
    }

    /// Insert an input or parameter value. Its gradient is available after
    /// `backward`.
    pub fn leaf(&self, val: Tensor) -> Var {
        self.push(val, vec![], None)
    }

    pub fn val(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].val)
    }

    pub fn value_cloned(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].val.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].val.shape().to_vec()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow()[v.0].clone()
    }

    /// Reverse sweep from a scalar output. Gradients are cleared first, so
    /// calling `backward` twice on the same tape yields identical results.
    pub fn backward(&self, out: Var) {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.0].val.len(), 1, "backward target must be scalar");
        let mut grads = self.grads.borrow_mut();
        for g in grads.iter_mut() {
            *g = None;
        }
        grads[out.0] = Some(Tensor::new(nodes[out.0].val.shape(), vec![1.0]));
        for i in (0..=out.0).rev() {
            let Some(out_grad) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(back) = &node.back {
                let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].val).collect();
                let contribs = back(&node.val, &out_grad, &parent_vals);
                assert_eq!(contribs.len(), node.parents.len());
                for (&p, c) in node.parents.iter().zip(contribs) {
                    match &mut grads[p] {
                        Some(g) => {
                            for (gi, ci) in g.data_mut().iter_mut().zip(c.data()) {
                                *gi += ci;
                            }
                        }
                        slot => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(out_grad);
        }
    }

    // ---- arithmetic primitives ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let (_, k) = av.dims2();
        let (k2, _) = bv.dims2();
        assert_eq!(
            k, k2,
            "matmul shape mismatch: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let out = matmul_raw(&av, &bv);
        drop((av, bv));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, dy, ps| {
                vec![matmul_nt_raw(dy, ps[1]), matmul_tn_raw(ps[0], dy)]
            })),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        fn t(x: &Tensor) -> Tensor {
            let (m, n) = x.dims2();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x.data()[i * n + j];
                }
            }
            Tensor::matrix(n, m, out)
        }
        let out = t(&self.val(a));
        self.push(out, vec![a.0], Some(Box::new(|_, dy, _| vec![t(dy)])))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape(), data);
        drop((av, bv));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, dy, _| vec![dy.clone(), dy.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data);
        drop((av, bv));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, dy, ps| {
                let da = dy.data().iter().zip(ps[1].data()).map(|(d, y)| d * y).collect();
                let db = dy.data().iter().zip(ps[0].data()).map(|(d, x)| d * x).collect();
                vec![Tensor::new(dy.shape(), da), Tensor::new(dy.shape(), db)]
            })),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        assert_eq!(av.shape(), bv.shape(), "div shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x / y).collect();
        let out = Tensor::new(av.shape(), data);
        drop((av, bv));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, dy, ps| {
                let da: Vec<f64> = dy.data().iter().zip(ps[1].data()).map(|(d, y)| d / y).collect();
                let db: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(ps[0].data().iter().zip(ps[1].data()))
                    .map(|(d, (x, y))| -d * x / (y * y))
                    .collect();
                vec![Tensor::new(dy.shape(), da), Tensor::new(dy.shape(), db)]
            })),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let av = self.val(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(av.shape(), data);
        drop(av);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, dy, _| {
                vec![Tensor::new(dy.shape(), dy.data().iter().map(|d| d * c).collect())]
            })),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let av = self.val(a);
        let data = av.data().iter().map(|x| x + c).collect();
        let out = Tensor::new(av.shape(), data);
        drop(av);
        self.push(out, vec![a.0], Some(Box::new(|_, dy, _| vec![dy.clone()])))
    }

    /// Add a `[1 x C]` row vector to every row of `[R x C]`.
    pub fn add_row_broadcast(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.val(a), self.val(row));
        let (r, c) = av.dims2();
        assert_eq!(rv.len(), c, "row broadcast width mismatch");
        let mut data = av.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rv.data()[j];
            }
        }
        let out = Tensor::matrix(r, c, data);
        drop((av, rv));
        self.push(
            out,
            vec![a.0, row.0],
            Some(Box::new(move |_, dy, ps| {
                let mut drow = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        drow[j] += dy.data()[i * c + j];
                    }
                }
                vec![dy.clone(), Tensor::new(ps[1].shape(), drow)]
            })),
        )
    }

    /// Multiply every row of `[R x C]` by a `[1 x C]` row vector.
    pub fn mul_row_broadcast(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.val(a), self.val(row));
        let (r, c) = av.dims2();
        assert_eq!(rv.len(), c);
        let mut data = av.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= rv.data()[j];
            }
        }
        let out = Tensor::matrix(r, c, data);
        drop((av, rv));
        self.push(
            out,
            vec![a.0, row.0],
            Some(Box::new(move |_, dy, ps| {
                let (a, rowv) = (ps[0], ps[1]);
                let mut da = vec![0.0; r * c];
                let mut drow = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let d = dy.data()[i * c + j];
                        da[i * c + j] = d * rowv.data()[j];
                        drow[j] += d * a.data()[i * c + j];
                    }
                }
                vec![Tensor::matrix(r, c, da), Tensor::new(rowv.shape(), drow)]
            })),
        )
    }

    /// Multiply every column of `[R x C]` by an `[R x 1]` column vector.
    pub fn mul_col_broadcast(&self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.val(a), self.val(col));
        let (r, c) = av.dims2();
        assert_eq!(cv.len(), r);
        let mut data = av.data().to_vec();
        for i in 0..r {
            let g = cv.data()[i];
            for j in 0..c {
                data[i * c + j] *= g;
            }
        }
        let out = Tensor::matrix(r, c, data);
        drop((av, cv));
        self.push(
            out,
            vec![a.0, col.0],
            Some(Box::new(move |_, dy, ps| {
                let (a, colv) = (ps[0], ps[1]);
                let mut da = vec![0.0; r * c];
                let mut dcol = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        let d = dy.data()[i * c + j];
                        da[i * c + j] = d * colv.data()[i];
                        dcol[i] += d * a.data()[i * c + j];
                    }
                }
                vec![Tensor::matrix(r, c, da), Tensor::new(colv.shape(), dcol)]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let s: f64 = self.val(a).data().iter().sum();
        let shape = self.shape_of(a);
        self.push(
            Tensor::scalar(s),
            vec![a.0],
            Some(Box::new(move |_, dy, _| vec![Tensor::filled(&shape, dy.item())])),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.val(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn dot(&self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// Per-row mean of `[R x C]` -> `[R x 1]`.
    pub fn row_mean(&self, a: Var) -> Var {
        let av = self.val(a);
        let (r, c) = av.dims2();
        let data: Vec<f64> = (0..r)
            .map(|i| av.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        drop(av);
        self.push(
            Tensor::matrix(r, 1, data),
            vec![a.0],
            Some(Box::new(move |_, dy, _| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let g = dy.data()[i] / c as f64;
                    da[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = g);
                }
                vec![Tensor::matrix(r, c, da)]
            })),
        )
    }

    /// Per-row max of `[R x C]` -> `[R x 1]`.
    pub fn row_max(&self, a: Var) -> Var {
        let av = self.val(a);
        let (r, c) = av.dims2();
        let mut data = Vec::with_capacity(r);
        let mut argmax = Vec::with_capacity(r);
        for i in 0..r {
            let row = &av.data()[i * c..(i + 1) * c];
            let (jm, &vm) = row
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap();
            data.push(vm);
            argmax.push(jm);
        }
        drop(av);
        self.push(
            Tensor::matrix(r, 1, data),
            vec![a.0],
            Some(Box::new(move |_, dy, _| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + argmax[i]] = dy.data()[i];
                }
                vec![Tensor::matrix(r, c, da)]
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.val(a);
        assert_eq!(av.len(), shape.iter().product::<usize>());
        let out = Tensor::new(shape, av.data().to_vec());
        let old_shape = av.shape().to_vec();
        drop(av);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, dy, _| {
                vec![Tensor::new(&old_shape, dy.data().to_vec())]
            })),
        )
    }

    /// `out[i] = a.flat[idx[i]]`; every source index must be used at most once
    /// or gradients will accumulate (which is also correct for duplications).
    pub fn gather(&self, a: Var, idx: Vec<usize>, out_shape: &[usize]) -> Var {
        let av = self.val(a);
        assert_eq!(idx.len(), out_shape.iter().product::<usize>());
        let src_len = av.len();
        let data: Vec<f64> = idx.iter().map(|&i| av.data()[i]).collect();
        let out = Tensor::new(out_shape, data);
        drop(av);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, dy, ps| {
                let mut da = vec![0.0; src_len];
                for (o, &i) in idx.iter().enumerate() {
                    da[i] += dy.data()[o];
                }
                vec![Tensor::new(ps[0].shape(), da)]
            })),
        )
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let (r, ca) = av.dims2();
        let (r2, cb) = bv.dims2();
        assert_eq!(r, r2, "concat_cols row mismatch");
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv.data()[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::matrix(r, ca + cb, data);
        drop((av, bv));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |_, dy, _| {
                let c = ca + cb;
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for i in 0..r {
                    da.extend_from_slice(&dy.data()[i * c..i * c + ca]);
                    db.extend_from_slice(&dy.data()[i * c + ca..(i + 1) * c]);
                }
                vec![Tensor::matrix(r, ca, da), Tensor::matrix(r, cb, db)]
            })),
        )
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let (ra, c) = av.dims2();
        let (rb, c2) = bv.dims2();
        assert_eq!(c, c2, "concat_rows col mismatch");
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::matrix(ra + rb, c, data);
        drop((av, bv));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |_, dy, _| {
                vec![
                    Tensor::matrix(ra, c, dy.data()[..ra * c].to_vec()),
                    Tensor::matrix(rb, c, dy.data()[ra * c..].to_vec()),
                ]
            })),
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.val(a);
        let (r, c) = av.dims2();
        assert!(start + len <= r);
        let out = Tensor::matrix(len, c, av.data()[start * c..(start + len) * c].to_vec());
        drop(av);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, dy, _| {
                let mut da = vec![0.0; r * c];
                da[start * c..(start + len) * c].copy_from_slice(dy.data());
                vec![Tensor::matrix(r, c, da)]
            })),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.val(a);
        let (r, c) = av.dims2();
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, data);
        drop(av);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, dy, _| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len]
                        .copy_from_slice(&dy.data()[i * len..(i + 1) * len]);
                }
                vec![Tensor::matrix(r, c, da)]
            })),
        )
    }

    // ---- nonlinearities ----

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let av = self.val(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(av.shape(), data);
        drop(av);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |y, dy, ps| {
                let da = dy
                    .data()
                    .iter()
                    .zip(ps[0].data().iter().zip(y.data()))
                    .map(|(d, (&x, &yv))| d * dfdx(x, yv))
                    .collect();
                vec![Tensor::new(dy.shape(), da)]
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn softplus(&self, a: Var) -> Var {
        // log(1+e^x), computed stably for large |x|
        self.unary(
            a,
            |x| if x > 30.0 { x } else { (1.0 + x.exp()).ln() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn selu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
                }
            },
            |x, _| {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            },
        )
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.val(a);
        let (r, c) = av.dims2();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &av.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                data[i * c + j] /= s;
            }
        }
        let out = Tensor::matrix(r, c, data);
        drop(av);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |y, dy, _| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let dr = &dy.data()[i * c..(i + 1) * c];
                    let s: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (dr[j] - s);
                    }
                }
                vec![Tensor::matrix(r, c, da)]
            })),
        )
    }

    /// Per-row layer normalization with learnable gain and bias (`[1 x C]`).
    pub fn layer_norm(&self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (av, gv, bv) = (self.val(a), self.val(gain), self.val(bias));
        let (r, c) = av.dims2();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut data = vec![0.0; r * c];
        let mut mus = vec![0.0; r];
        let mut inv_sd = vec![0.0; r];
        for i in 0..r {
            let row = &av.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let isd = 1.0 / (var + eps).sqrt();
            mus[i] = mu;
            inv_sd[i] = isd;
            for j in 0..c {
                data[i * c + j] = (row[j] - mu) * isd * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::matrix(r, c, data);
        drop((av, gv, bv));
        self.push(
            out,
            vec![a.0, gain.0, bias.0],
            Some(Box::new(move |_, dy, ps| {
                let (a, g) = (ps[0], ps[1]);
                let mut da = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let row = &a.data()[i * c..(i + 1) * c];
                    let dr = &dy.data()[i * c..(i + 1) * c];
                    let isd = inv_sd[i];
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mus[i]) * isd).collect();
                    let dxhat: Vec<f64> = dr.iter().zip(g.data()).map(|(d, gj)| d * gj).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[i * c + j] = isd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dg[j] += dr[j] * xhat[j];
                        db[j] += dr[j];
                    }
                }
                vec![
                    Tensor::matrix(r, c, da),
                    Tensor::new(ps[1].shape(), dg),
                    Tensor::new(ps[2].shape(), db),
                ]
            })),
        )
    }

    /// Inverted dropout; identity when `training` is false.
    pub fn dropout(&self, a: Var, p: f64, training: bool, rng: &mut impl Rng) -> Var {
        if !training || p == 0.0 {
            return a;
        }
        let av = self.val(a);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..av.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(av.shape(), data);
        drop(av);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, dy, _| {
                let da = dy.data().iter().zip(&mask).map(|(d, m)| d * m).collect();
                vec![Tensor::new(dy.shape(), da)]
            })),
        )
    }

    /// Causal depthwise 1-D convolution over `[T x F]` with kernel `[W x F]`
    /// and bias `[1 x F]`: `y[t,f] = b[f] + sum_j w[j,f] * x[t-j,f]`.
    pub fn causal_depthwise_conv(&self, x: Var, w: Var, bias: Var) -> Var {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(bias));
        let (t, f) = xv.dims2();
        let (width, f2) = wv.dims2();
        assert_eq!(f, f2);
        assert_eq!(bv.len(), f);
        let mut data = vec![0.0; t * f];
        for ti in 0..t {
            for fi in 0..f {
                let mut acc = bv.data()[fi];
                for j in 0..width.min(ti + 1) {
                    acc += wv.data()[j * f + fi] * xv.data()[(ti - j) * f + fi];
                }
                data[ti * f + fi] = acc;
            }
        }
        let out = Tensor::matrix(t, f, data);
        drop((xv, wv, bv));
        self.push(
            out,
            vec![x.0, w.0, bias.0],
            Some(Box::new(move |_, dy, ps| {
                let (xp, wp) = (ps[0], ps[1]);
                let mut dx = vec![0.0; t * f];
                let mut dw = vec![0.0; width * f];
                let mut db = vec![0.0; f];
                for ti in 0..t {
                    for fi in 0..f {
                        let d = dy.data()[ti * f + fi];
                        db[fi] += d;
                        for j in 0..width.min(ti + 1) {
                            dx[(ti - j) * f + fi] += d * wp.data()[j * f + fi];
                            dw[j * f + fi] += d * xp.data()[(ti - j) * f + fi];
                        }
                    }
                }
                vec![
                    Tensor::matrix(t, f, dx),
                    Tensor::matrix(width, f, dw),
                    Tensor::new(ps[2].shape(), db),
                ]
            })),
        )
    }

    /// Element-wise map applied in the forward pass only; the backward pass
    /// treats the op as identity (straight-through estimator).
    pub fn straight_through(&self, a: Var, f: impl Fn(&[f64]) -> Vec<f64>) -> Var {
        let av = self.val(a);
        let data = f(av.data());
        assert_eq!(data.len(), av.len());
        let out = Tensor::new(av.shape(), data);
        drop(av);
        self.push(out, vec![a.0], Some(Box::new(|_, dy, _| vec![dy.clone()])))
    }

    /// Fused selective state-space scan.
    ///
    /// `a: [F x N]` continuous diagonal state matrix per feature,
    /// `bmat, cmat: [T x N]` per-step input/output maps,
    /// `step: [T x F]` positive step sizes, `h: [T x F]` inputs.
    /// Per (t, f): ZOH-discretize (abar, bbar) from (a[f], bmat[t], step[t,f]),
    /// run s_t = abar*s_{t-1} + bbar*h_t, y[t,f] = cmat[t] . s_t.
    ///
    /// Backward recomputes (abar, bbar) and replays the state trajectory
    /// saved from the forward pass.
    pub fn selective_scan(&self, a: Var, bmat: Var, cmat: Var, step: Var, h: Var) -> Var {
        let (av, bv, cv, dv, hv) = (
            self.val(a),
            self.val(bmat),
            self.val(cmat),
            self.val(step),
            self.val(h),
        );
        let (f_dim, n) = av.dims2();
        let (t_len, n2) = bv.dims2();
        assert_eq!(n, n2, "a/bmat state size mismatch");
        assert_eq!(cv.dims2(), (t_len, n), "cmat shape");
        assert_eq!(dv.dims2(), (t_len, f_dim), "step shape");
        assert_eq!(hv.dims2(), (t_len, f_dim), "h shape");
        let discretize = |aa: f64, d: f64, b: f64| -> (f64, f64) {
            let abar = (d * aa).exp();
            let bbar = if aa.abs() < 1e-12 { d * b } else { (abar - 1.0) / aa * b };
            (abar, bbar)
        };
        // full state trajectory, [T][F x N]
        let mut states = vec![0.0f64; t_len * f_dim * n];
        let mut y = vec![0.0f64; t_len * f_dim];
        for t in 0..t_len {
            for f in 0..f_dim {
                let mut acc = 0.0;
                for i in 0..n {
                    let (abar, bbar) =
                        discretize(av.data()[f * n + i], dv.data()[t * f_dim + f], bv.data()[t * n + i]);
                    let prev = if t == 0 { 0.0 } else { states[((t - 1) * f_dim + f) * n + i] };
                    let s = abar * prev + bbar * hv.data()[t * f_dim + f];
                    states[(t * f_dim + f) * n + i] = s;
                    acc += cv.data()[t * n + i] * s;
                }
                y[t * f_dim + f] = acc;
            }
        }
        let out = Tensor::matrix(t_len, f_dim, y);
        drop((av, bv, cv, dv, hv));
        self.push(
            out,
            vec![a.0, bmat.0, cmat.0, step.0, h.0],
            Some(Box::new(move |_, dy, ps| {
                let (ap, bp, cp, dp, hp) = (ps[0], ps[1], ps[2], ps[3], ps[4]);
                let mut da = vec![0.0; f_dim * n];
                let mut db = vec![0.0; t_len * n];
                let mut dc = vec![0.0; t_len * n];
                let mut dstep = vec![0.0; t_len * f_dim];
                let mut dh = vec![0.0; t_len * f_dim];
                // running adjoint of the state, per (f, i)
                let mut ds = vec![0.0; f_dim * n];
                for t in (0..t_len).rev() {
                    for f in 0..f_dim {
                        let g = dy.data()[t * f_dim + f];
                        let d = dp.data()[t * f_dim + f];
                        let hx = hp.data()[t * f_dim + f];
                        for i in 0..n {
                            let aa = ap.data()[f * n + i];
                            let b = bp.data()[t * n + i];
                            let abar = (d * aa).exp();
                            let (bbar, dbbar_da, dbbar_dd) = if aa.abs() < 1e-12 {
                                // limits of (e^{da}-1)/a and its derivatives at a = 0
                                (d * b, b * d * d / 2.0, b)
                            } else {
                                (
                                    (abar - 1.0) / aa * b,
                                    b * (d * abar * aa - (abar - 1.0)) / (aa * aa),
                                    b * abar,
                                )
                            };
                            let s = states[(t * f_dim + f) * n + i];
                            let s_prev =
                                if t == 0 { 0.0 } else { states[((t - 1) * f_dim + f) * n + i] };
                            dc[t * n + i] += g * s;
                            let dsi = ds[f * n + i] + cp.data()[t * n + i] * g;
                            let dabar = dsi * s_prev;
                            let dbbar = dsi * hx;
                            dh[t * f_dim + f] += bbar * dsi;
                            if aa.abs() < 1e-12 {
                                db[t * n + i] += dbbar * d;
                            } else {
                                db[t * n + i] += dbbar * (abar - 1.0) / aa;
                            }
                            dstep[t * f_dim + f] += dabar * aa * abar + dbbar * dbbar_dd;
                            da[f * n + i] += dabar * d * abar + dbbar * dbbar_da;
                            ds[f * n + i] = dsi * abar;
                        }
                    }
                }
                vec![
                    Tensor::matrix(f_dim, n, da),
                    Tensor::matrix(t_len, n, db),
                    Tensor::matrix(t_len, n, dc),
                    Tensor::matrix(t_len, f_dim, dstep),
                    Tensor::matrix(t_len, f_dim, dh),
                ]
            })),
        )
    }
}
