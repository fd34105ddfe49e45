//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op pushes a node holding its forward value
//! and a closure mapping the output gradient to gradients of its parents.
//! Nodes whose parents are all constants get no closure.
//!
//! Piecewise ops (abs, min, bilinear cell choice, clamping, masks derived
//! from comparisons) route their branch decisions through
//! [`Graph::decide`]. A graph built with [`Graph::replaying`] reuses a
//! previous tape's decisions in order, so a perturbed forward pass
//! evaluates the same smooth piece as the reference pass. Finite
//! differences taken that way are comparable to the analytic gradient even
//! when a perturbation would otherwise cross a kink.
//!
//! Shape errors inside the graph are programming errors and panic; public
//! entry points validate their inputs before building a graph.

use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Branch decisions recorded by one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BranchTape(Vec<Rc<Vec<i32>>>);

impl BranchTape {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    recorded: Vec<Rc<Vec<i32>>>,
    replay: Option<Vec<Rc<Vec<i32>>>>,
    cursor: usize,
}

/// Gradients of a scalar with respect to every leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose piecewise ops reuse the decisions of `tape`.
    pub fn replaying(tape: &BranchTape) -> Self {
        Graph {
            replay: Some(tape.0.clone()),
            ..Self::default()
        }
    }

    pub fn branch_tape(&self) -> BranchTape {
        BranchTape(self.recorded.clone())
    }

    /// Returns the decisions produced by `compute`, or the recorded ones
    /// when replaying.
    pub fn decide(&mut self, compute: impl FnOnce() -> Vec<i32>) -> Rc<Vec<i32>> {
        let d = match &self.replay {
            Some(tape) => {
                let d = tape
                    .get(self.cursor)
                    .cloned()
                    .expect("replayed graph diverged from its branch tape");
                self.cursor += 1;
                d
            }
            None => Rc::new(compute()),
        };
        self.recorded.push(d.clone());
        d
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<Tensor> {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.constant_rc(Rc::new(t))
    }

    pub fn constant_rc(&mut self, t: Rc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value, no gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value_rc(v);
        self.constant_rc(t)
    }

    /// Pushes a custom op. `backward` receives the output gradient and
    /// returns one optional gradient per parent, in order.
    pub fn op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward needs a scalar root"
        );
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[p].value.len(), "grad size at node {p}");
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ----------------------------------------------------------------
    // elementwise

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).unwrap();
        self.op(out, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y).unwrap();
        self.op(out, &[a, b], |g| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let out = av.zip_map(&bv, |x, y| x * y).unwrap();
        self.op(out, &[a, b], move |g| {
            vec![
                Some(g.zip_map(&bv, |g, y| g * y).unwrap()),
                Some(g.zip_map(&av, |g, x| g * x).unwrap()),
            ]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let out = av.zip_map(&bv, |x, y| x / y).unwrap();
        self.op(out, &[a, b], move |g| {
            let ga = g.zip_map(&bv, |g, y| g / y).unwrap();
            let mut gb = g.clone();
            for ((o, x), y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                *o = -*o * x / (y * y);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.op(out, &[a], move |g| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.op(out, &[a], |g| vec![Some(g.clone())])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = av.map(|x| x * x);
        self.op(out, &[a], move |g| {
            vec![Some(g.zip_map(&av, |g, x| 2.0 * g * x).unwrap())]
        })
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = av.map(|x| 1.0 / x);
        self.op(out, &[a], move |g| {
            vec![Some(g.zip_map(&av, |g, x| -g / (x * x)).unwrap())]
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = Rc::new(self.value(a).map(f64::exp));
        let out2 = out.clone();
        self.op((*out).clone(), &[a], move |g| {
            vec![Some(g.zip_map(&out2, |g, y| g * y).unwrap())]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = Rc::new(self.value(a).map(sigmoid));
        let out2 = out.clone();
        self.op((*out).clone(), &[a], move |g| {
            vec![Some(g.zip_map(&out2, |g, y| g * y * (1.0 - y)).unwrap())]
        })
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = av.map(|x| x * sigmoid(x));
        self.op(out, &[a], move |g| {
            vec![Some(
                g.zip_map(&av, |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .unwrap(),
            )]
        })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let signs = self.decide(|| {
            av.data()
                .iter()
                .map(|&x| if x >= 0.0 { 1 } else { -1 })
                .collect()
        });
        let mut out = (*av).clone();
        for (o, &s) in out.data_mut().iter_mut().zip(signs.iter()) {
            *o *= s as f64;
        }
        self.op(out, &[a], move |g| {
            let mut gx = g.clone();
            for (o, &s) in gx.data_mut().iter_mut().zip(signs.iter()) {
                *o *= s as f64;
            }
            vec![Some(gx)]
        })
    }

    /// Elementwise minimum; ties pick `a`.
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "min2");
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let pick_b = self.decide(|| {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| i32::from(y < x))
                .collect()
        });
        let mut out = (*av).clone();
        for ((o, &y), &p) in out.data_mut().iter_mut().zip(bv.data()).zip(pick_b.iter()) {
            if p == 1 {
                *o = y;
            }
        }
        self.op(out, &[a, b], move |g| {
            let mut ga = g.clone();
            let mut gb = g.clone();
            for ((x, y), &p) in ga
                .data_mut()
                .iter_mut()
                .zip(gb.data_mut().iter_mut())
                .zip(pick_b.iter())
            {
                if p == 1 {
                    *x = 0.0;
                } else {
                    *y = 0.0;
                }
            }
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn max2(&mut self, a: Var, b: Var) -> Var {
        let na = self.scale(a, -1.0);
        let nb = self.scale(b, -1.0);
        let m = self.min2(na, nb);
        self.scale(m, -1.0)
    }

    /// `x * m` where `m` is repeated to cover `x` (`x.len()` must be a
    /// multiple of `m.len()`). Covers per-pixel masks over channels and
    /// row vectors over token matrices.
    pub fn mul_tiled(&mut self, x: Var, m: Var) -> Var {
        let (xv, mv) = (self.value_rc(x), self.value_rc(m));
        let k = mv.len();
        assert!(k > 0 && xv.len() % k == 0, "mul_tiled: {} by {}", xv.len(), k);
        let mut out = (*xv).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= mv.data()[i % k];
        }
        self.op(out, &[x, m], move |g| {
            let mut gx = g.clone();
            let mut gm = vec![0.0; k];
            for (i, o) in gx.data_mut().iter_mut().enumerate() {
                gm[i % k] += *o * xv.data()[i];
                *o *= mv.data()[i % k];
            }
            vec![
                Some(gx),
                Some(Tensor::new(mv.shape().to_vec(), gm).unwrap()),
            ]
        })
    }

    /// `x + b` with `b` repeated to cover `x`.
    pub fn add_tiled(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value_rc(x), self.value_rc(b));
        let k = bv.len();
        assert!(k > 0 && xv.len() % k == 0, "add_tiled: {} by {}", xv.len(), k);
        let mut out = (*xv).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % k];
        }
        let bshape = bv.shape().to_vec();
        self.op(out, &[x, b], move |g| {
            let mut gb = vec![0.0; k];
            for (i, v) in g.data().iter().enumerate() {
                gb[i % k] += v;
            }
            vec![Some(g.clone()), Some(Tensor::new(bshape.clone(), gb).unwrap())]
        })
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar needs a scalar");
        self.mul_tiled(x, s)
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let r = self.recip(s);
        self.mul_scalar(x, r)
    }

    // ----------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::scalar(av.sum());
        self.op(out, &[a], move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ m·x / Σ m` with a constant weight map `m` of the same shape; zero
    /// when the weights sum to zero.
    pub fn masked_mean(&mut self, x: Var, mask: Rc<Tensor>) -> Var {
        let xv = self.value_rc(x);
        assert_eq!(xv.shape(), mask.shape(), "masked_mean: mask shape");
        let count: f64 = mask.sum();
        let out = if count > 0.0 {
            xv.data()
                .iter()
                .zip(mask.data())
                .map(|(a, m)| a * m)
                .sum::<f64>()
                / count
        } else {
            0.0
        };
        self.op(Tensor::scalar(out), &[x], move |g| {
            let gv = g.item();
            let gx = if count > 0.0 {
                mask.map(|m| gv * m / count)
            } else {
                Tensor::zeros(mask.shape())
            };
            vec![Some(gx)]
        })
    }

    /// `[C, H, W] -> [1, H, W]`, mean over channels.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("channel_mean");
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for ch in 0..c {
            for (o, v) in out
                .iter_mut()
                .zip(&self.value(a).data()[ch * plane..(ch + 1) * plane])
            {
                *o += v / c as f64;
            }
        }
        self.op(
            Tensor::new(vec![1, h, w], out).unwrap(),
            &[a],
            move |g| {
                let mut gx = Vec::with_capacity(c * plane);
                for _ in 0..c {
                    gx.extend(g.data().iter().map(|v| v / c as f64));
                }
                vec![Some(Tensor::new(vec![c, h, w], gx).unwrap())]
            },
        )
    }

    /// `[C, H, W] -> [C]`, mean over pixels.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("global_avg_pool");
        let plane = h * w;
        let d = self.value(a).data();
        let out: Vec<f64> = (0..c)
            .map(|ch| d[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        self.op(Tensor::new(vec![c], out).unwrap(), &[a], move |g| {
            let mut gx = Vec::with_capacity(c * plane);
            for ch in 0..c {
                gx.extend(std::iter::repeat_n(g.data()[ch] / plane as f64, plane));
            }
            vec![Some(Tensor::new(vec![c, h, w], gx).unwrap())]
        })
    }

    // ----------------------------------------------------------------
    // shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let old = av.shape().to_vec();
        let out = av.clone().reshaped(shape.to_vec()).expect("reshape");
        self.op(out, &[a], move |g| {
            vec![Some(g.clone().reshaped(old.clone()).unwrap())]
        })
    }

    /// `[N, M] -> [M, N]`
    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = dims2(self.value(a));
        let out = Tensor::new(vec![m, n], transpose_raw(self.value(a).data(), n, m)).unwrap();
        self.op(out, &[a], move |g| {
            vec![Some(
                Tensor::new(vec![n, m], transpose_raw(g.data(), m, n)).unwrap(),
            )]
        })
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape()[1..], first[1..], "concat0: trailing dims differ");
            lead += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
        self.op(Tensor::new(shape, data).unwrap(), parts, move |g| {
            let mut off = 0;
            sizes
                .iter()
                .zip(&shapes)
                .map(|(&n, s)| {
                    let t = Tensor::new(s.clone(), g.data()[off..off + n].to_vec()).unwrap();
                    off += n;
                    Some(t)
                })
                .collect()
        })
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        assert!(start + len <= shape[0], "slice0 out of range");
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = Tensor::new(
            out_shape,
            av.data()[start * inner..(start + len) * inner].to_vec(),
        )
        .unwrap();
        self.op(out, &[a], move |g| {
            let mut gx = Tensor::zeros(&shape);
            gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(gx)]
        })
    }

    /// Column concatenation of `[N, C_i]` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = dims2(self.value(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = dims2(self.value(p));
                assert_eq!(r, n, "concat_cols: row counts differ");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.op(Tensor::new(vec![n, total], out).unwrap(), parts, move |g| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut gx = vec![0.0; n * w];
                    for r in 0..n {
                        gx[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    Some(Tensor::new(vec![n, w], gx).unwrap())
                })
                .collect()
        })
    }

    /// Columns `start..start+len` of an `[N, C]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, c) = dims2(self.value(a));
        assert!(start + len <= c, "slice_cols out of range");
        let d = self.value(a).data();
        let mut out = vec![0.0; n * len];
        for r in 0..n {
            out[r * len..(r + 1) * len].copy_from_slice(&d[r * c + start..r * c + start + len]);
        }
        self.op(Tensor::new(vec![n, len], out).unwrap(), &[a], move |g| {
            let mut gx = vec![0.0; n * c];
            for r in 0..n {
                gx[r * c + start..r * c + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::new(vec![n, c], gx).unwrap())]
        })
    }

    /// `[H*W, C]` tokens to a `[C, H, W]` map.
    pub fn tokens_to_map(&mut self, a: Var, h: usize, w: usize) -> Var {
        let (n, c) = dims2(self.value(a));
        assert_eq!(n, h * w, "tokens_to_map: {} tokens for {}x{}", n, h, w);
        let t = self.transpose(a);
        self.reshape(t, &[c, h, w])
    }

    /// `[C, H, W]` map to `[H*W, C]` tokens.
    pub fn map_to_tokens(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("map_to_tokens");
        let r = self.reshape(a, &[c, h * w]);
        self.transpose(r)
    }

    // ----------------------------------------------------------------
    // linear algebra

    /// `[N, K] x [K, M]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = dims2(self.value(a));
        let (k2, m) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul inner dims");
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let out = mm_nn(av.data(), bv.data(), n, k, m);
        self.op(Tensor::new(vec![n, m], out).unwrap(), &[a, b], move |g| {
            let ga = mm_nt(g.data(), bv.data(), n, m, k);
            let gb = mm_tn(av.data(), g.data(), n, k, m);
            vec![
                Some(Tensor::new(vec![n, k], ga).unwrap()),
                Some(Tensor::new(vec![k, m], gb).unwrap()),
            ]
        })
    }

    /// `[N, K] x [M, K]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = dims2(self.value(a));
        let (m, k2) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul_nt inner dims");
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let out = mm_nt(av.data(), bv.data(), n, k, m);
        self.op(Tensor::new(vec![n, m], out).unwrap(), &[a, b], move |g| {
            let ga = mm_nn(g.data(), bv.data(), n, m, k);
            let gb = mm_tn(g.data(), av.data(), n, m, k);
            vec![
                Some(Tensor::new(vec![n, k], ga).unwrap()),
                Some(Tensor::new(vec![m, k], gb).unwrap()),
            ]
        })
    }

    /// Affine map of token rows: `x W + b` with `W: [C, D]`, `b: [D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_tiled(y, b)
    }

    /// Row softmax of an `[N, M]` matrix (or a vector).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = *av.shape().last().unwrap();
        let shape = av.shape().to_vec();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Rc::new(Tensor::new(shape, out).unwrap());
        let y = out.clone();
        self.op((*out).clone(), &[a], move |g| {
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(m).zip(y.data().chunks(m)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (gv, yv) in gr.iter_mut().zip(yr) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Per-row layer normalization of `[N, C]` with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (n, c) = dims2(self.value(x));
        let xv = self.value_rc(x);
        let gv = self.value_rc(gamma);
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mu) * is;
            }
        }
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv.data()[i % c] + bv[i % c])
            .collect();
        self.op(
            Tensor::new(vec![n, c], out).unwrap(),
            &[x, gamma, beta],
            move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; n * c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for r in 0..n {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let i = r * c + j;
                        ggamma[j] += gd[i] * xhat[i];
                        gbeta[j] += gd[i];
                        let dxh = gd[i] * gv.data()[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i];
                    }
                    for j in 0..c {
                        let i = r * c + j;
                        let dxh = gd[i] * gv.data()[j];
                        gx[i] = inv_std[r] * (dxh - s1 / c as f64 - xhat[i] * s2 / c as f64);
                    }
                }
                vec![
                    Some(Tensor::new(vec![n, c], gx).unwrap()),
                    Some(Tensor::new(vec![c], ggamma).unwrap()),
                    Some(Tensor::new(vec![c], gbeta).unwrap()),
                ]
            },
        )
    }

    // ----------------------------------------------------------------
    // spatial

    /// 2-D convolution of `[Ci, H, W]` by `[Co, Ci, k, k]` with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (ci, h, wd) = self.value(x).chw().expect("conv2d input");
        let ws = self.value(w).shape().to_vec();
        assert!(
            ws.len() == 4 && ws[1] == ci && ws[2] == ws[3],
            "conv2d weight {:?} for {} input channels",
            ws,
            ci
        );
        let geo = ConvGeom {
            ci,
            co: ws[0],
            k: ws[2],
            h,
            w: wd,
            stride,
            pad,
        };
        let (xv, wv) = (self.value_rc(x), self.value_rc(w));
        let out = conv_forward(&geo, xv.data(), wv.data(), self.value(b).data());
        let (ho, wo) = geo.out_dims();
        self.op(
            Tensor::new(vec![geo.co, ho, wo], out).unwrap(),
            &[x, w, b],
            move |g| {
                let (gx, gw, gb) = conv_backward(&geo, xv.data(), wv.data(), g.data());
                vec![
                    Some(Tensor::new(vec![geo.ci, geo.h, geo.w], gx).unwrap()),
                    Some(Tensor::new(vec![geo.co, geo.ci, geo.k, geo.k], gw).unwrap()),
                    Some(Tensor::new(vec![geo.co], gb).unwrap()),
                ]
            },
        )
    }

    /// 2x2 average pooling with ceil-mode output size; partial windows
    /// average over their in-range pixels.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("avg_pool2");
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let d = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (mut s, mut n) = (0.0, 0.0);
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for x in 2 * ox..(2 * ox + 2).min(w) {
                            s += d[(ch * h + y) * w + x];
                            n += 1.0;
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = s / n;
                }
            }
        }
        self.op(Tensor::new(vec![c, ho, wo], out).unwrap(), &[a], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let ys = 2 * oy..(2 * oy + 2).min(h);
                        let xs = 2 * ox..(2 * ox + 2).min(w);
                        let n = (ys.len() * xs.len()) as f64;
                        let gv = g.data()[(ch * ho + oy) * wo + ox] / n;
                        for y in ys {
                            for x in xs.clone() {
                                gx[(ch * h + y) * w + x] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(vec![c, h, w], gx).unwrap())]
        })
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("upsample_nearest2");
        let (ho, wo) = (2 * h, 2 * w);
        let d = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out[(ch * ho + y) * wo + x] = d[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        self.op(Tensor::new(vec![c, ho, wo], out).unwrap(), &[a], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        gx[(ch * h + y / 2) * w + x / 2] += g.data()[(ch * ho + y) * wo + x];
                    }
                }
            }
            vec![Some(Tensor::new(vec![c, h, w], gx).unwrap())]
        })
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&mut self, a: Var, ho: usize, wo: usize) -> Var {
        let (c, h, w) = self.value(a).chw().expect("resize_bilinear");
        if (h, w) == (ho, wo) {
            return a;
        }
        let ty = resize_taps(h, ho);
        let tx = resize_taps(w, wo);
        let d = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let src = &d[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    out[(ch * ho + oy) * wo + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        self.op(Tensor::new(vec![c, ho, wo], out).unwrap(), &[a], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g.data()[(ch * ho + oy) * wo + ox];
                        dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(Tensor::new(vec![c, h, w], gx).unwrap())]
        })
    }

    /// 3x3 box mean with reflection padding.
    pub fn box3_reflect(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("box3_reflect");
        let ry: Vec<[usize; 3]> = (0..h).map(|y| reflect3(y, h)).collect();
        let rx: Vec<[usize; 3]> = (0..w).map(|x| reflect3(x, w)).collect();
        let d = self.value(a).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let src = &d[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for &yy in &ry[y] {
                        for &xx in &rx[x] {
                            s += src[yy * w + xx];
                        }
                    }
                    out[(ch * h + y) * w + x] = s / 9.0;
                }
            }
        }
        self.op(Tensor::new(vec![c, h, w], out).unwrap(), &[a], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let gv = g.data()[(ch * h + y) * w + x] / 9.0;
                        for &yy in &ry[y] {
                            for &xx in &rx[x] {
                                dst[yy * w + xx] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(vec![c, h, w], gx).unwrap())]
        })
    }

    /// Forward difference along x: `[C, H, W] -> [C, H, W-1]`.
    pub fn diff_x(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("diff_x");
        assert!(w >= 2, "diff_x needs width >= 2");
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(c * h * (w - 1));
        for row in d.chunks(w) {
            out.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        self.op(Tensor::new(vec![c, h, w - 1], out).unwrap(), &[a], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for (r, grow) in g.data().chunks(w - 1).enumerate() {
                for (x, gv) in grow.iter().enumerate() {
                    gx[r * w + x + 1] += gv;
                    gx[r * w + x] -= gv;
                }
            }
            vec![Some(Tensor::new(vec![c, h, w], gx).unwrap())]
        })
    }

    /// Forward difference along y: `[C, H, W] -> [C, H-1, W]`.
    pub fn diff_y(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("diff_y");
        assert!(h >= 2, "diff_y needs height >= 2");
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(c * (h - 1) * w);
        for ch in 0..c {
            for y in 0..h - 1 {
                for x in 0..w {
                    out.push(d[(ch * h + y + 1) * w + x] - d[(ch * h + y) * w + x]);
                }
            }
        }
        self.op(Tensor::new(vec![c, h - 1, w], out).unwrap(), &[a], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h - 1 {
                    for x in 0..w {
                        let gv = g.data()[(ch * (h - 1) + y) * w + x];
                        gx[(ch * h + y + 1) * w + x] += gv;
                        gx[(ch * h + y) * w + x] -= gv;
                    }
                }
            }
            vec![Some(Tensor::new(vec![c, h, w], gx).unwrap())]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        &[n, m] => (n, m),
        &[m] => (1, m),
        s => panic!("expected a matrix, got {:?}", s),
    }
}

fn transpose_raw(d: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    out
}

/// `A[n,k] B[k,m]`
fn mm_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `A[n,k] B[m,k]^T`
fn mm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] = arow
                .iter()
                .zip(&b[j * k..(j + 1) * k])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    c
}

/// `A[n,k]^T B[n,m]` giving `[k, m]`
fn mm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in c[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    co: usize,
    k: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_dims(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Output columns `ox` whose input column `ox*s + kx - pad` is in range.
    fn valid_range(&self, kx: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= n_in - 1
        let hi_val = n_in as isize - 1 - off;
        let hi = if hi_val < 0 { -1 } else { hi_val / s };
        let lo = lo.max(0) as usize;
        let hi = ((hi + 1).max(0) as usize).min(n_out);
        (lo, hi.max(lo))
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_dims();
    let mut out = vec![0.0; g.co * ho * wo];
    let s = g.stride;
    for co in 0..g.co {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.fill(b[co]);
        for ci in 0..g.ci {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (ylo, yhi) = g.valid_range(ky, g.h, ho);
                for kx in 0..g.k {
                    let wv = w[((co * g.ci + ci) * g.k + ky) * g.k + kx];
                    let (xlo, xhi) = g.valid_range(kx, g.w, wo);
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - g.pad;
                        let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut plane[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let base = kx as isize - g.pad as isize;
                            let src = &row_in[(xlo as isize + base) as usize..(xhi as isize + base) as usize];
                            for (o, v) in row_out[xlo..xhi].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                row_out[ox] += wv * row_in[ox * s + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], go: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_dims();
    let s = g.stride;
    let mut gx = vec![0.0; g.ci * g.h * g.w];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.co];
    for co in 0..g.co {
        let gplane = &go[co * ho * wo..(co + 1) * ho * wo];
        gb[co] = gplane.iter().sum();
        for ci in 0..g.ci {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let gxin = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (ylo, yhi) = g.valid_range(ky, g.h, ho);
                for kx in 0..g.k {
                    let widx = ((co * g.ci + ci) * g.k + ky) * g.k + kx;
                    let wv = w[widx];
                    let (xlo, xhi) = g.valid_range(kx, g.w, wo);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - g.pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        for ox in xlo..xhi {
                            let ix = iy * g.w + ox * s + kx - g.pad;
                            acc += grow[ox] * xin[ix];
                            gxin[ix] += wv * grow[ox];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Source taps `(lo, hi, frac)` for a half-pixel-centered 1-D resize.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn reflect3(i: usize, n: usize) -> [usize; 3] {
    let r = |j: isize| -> usize {
        if n == 1 {
            0
        } else if j < 0 {
            (-j) as usize
        } else if j >= n as isize {
            (2 * (n as isize - 1) - j) as usize
        } else {
            j as usize
        }
    };
    let i = i as isize;
    [r(i - 1), r(i), r(i + 1)]
}
