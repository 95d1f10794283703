//! Dynamic compute tape with reverse-mode differentiation.
//!
//! Every forward pass records its operations on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node walks the recording in reverse and
//! accumulates vector-Jacobian products. The tape carries exactly the
//! operations the network needs, all in `f64`. Node evaluation order is the
//! recording order, so gradients are bitwise reproducible run to run.

use ndarray::{ArrayD, Axis, IxDyn};

use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

pub(crate) struct Node {
    pub(crate) value: ArrayD<f64>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// Records a forward pass and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        param: Option<ParamId>,
    ) -> Var {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape (node {})",
            self.nodes.len()
        );
        self.nodes.push(Node { value, parents, backward, param });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or constant leaf.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, None)
    }

    /// Binds a stored parameter as a leaf so its gradient can be collected.
    pub fn param(&mut self, ps: &ParamStore, id: ParamId) -> Var {
        self.push(ps.value(id).clone(), vec![], None, Some(id))
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Extracts a scalar node's value.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert!(val.len() == 1, "scalar() on node of shape {:?}", val.shape());
        val.iter().next().copied().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(
            self.value(root).len() == 1,
            "backward root must be scalar, got shape {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(grad_out) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let parent_vals: Vec<&ArrayD<f64>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let contribs = bw(&grad_out, &parent_vals, &node.value);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (p, c) in node.parents.iter().zip(contribs) {
                    debug_assert_eq!(c.shape(), self.nodes[p.0].value.shape());
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &c,
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(grad_out);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, Var(i))))
            .collect();
        Gradients { grads, params }
    }
}

/// Gradients of one backward pass, addressable by [`Var`] or [`ParamId`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Accumulated gradient per bound parameter. Parameters bound more than
    /// once have their contributions summed.
    pub fn by_param(&self) -> Vec<(ParamId, ArrayD<f64>)> {
        let mut out: Vec<(ParamId, ArrayD<f64>)> = Vec::new();
        for &(id, var) in &self.params {
            let Some(g) = self.wrt(var) else { continue };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => *acc += g,
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}

fn broadcast_dims(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "incompatible shapes {a:?} vs {b:?}");
            x.max(y)
        })
        .collect()
}

/// Sums `g` over every axis that was broadcast up from size 1 in `target`.
pub(crate) fn reduce_to(mut g: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    for (axis, &t) in target.iter().enumerate() {
        if t == 1 && g.shape()[axis] > 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

impl Tape {
    /// Elementwise maximum with zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(
            v,
            vec![x],
            Some(Box::new(|g, pv, _| {
                let mut dx = g.clone();
                dx.zip_mut_with(pv[0], |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![dx]
            })),
            None,
        )
    }

    /// Logistic sigmoid, numerically stable on both tails.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(stable_sigmoid);
        self.push(
            v,
            vec![x],
            Some(Box::new(|g, _, out| {
                let mut dx = g.clone();
                dx.zip_mut_with(out, |d, &y| *d *= y * (1.0 - y));
                vec![dx]
            })),
            None,
        )
    }

    /// Softmax over the channel axis of a `(B, C, 1, 1)` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4);
        assert_eq!(&xv.shape()[2..], &[1, 1], "softmax_channels expects (B,C,1,1)");
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = xv.clone();
        for bi in 0..b {
            let mut lane = out.slice_mut(ndarray::s![bi, .., 0, 0].as_ref());
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|z| (z - max).exp());
            let sum: f64 = lane.iter().sum();
            lane.mapv_inplace(|e| e / sum);
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _, y| {
                let mut dx = g.clone();
                for bi in 0..b {
                    let dot: f64 = (0..c).map(|ci| g[[bi, ci, 0, 0]] * y[[bi, ci, 0, 0]]).sum();
                    for ci in 0..c {
                        dx[[bi, ci, 0, 0]] = y[[bi, ci, 0, 0]] * (g[[bi, ci, 0, 0]] - dot);
                    }
                }
                vec![dx]
            })),
            None,
        )
    }

    /// Global average pooling `(B,C,H,W) -> (B,C,1,1)`.
    pub fn gap(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4);
        let (h, w) = (xv.shape()[2], xv.shape()[3]);
        let v = xv
            .mean_axis(Axis(3))
            .unwrap()
            .mean_axis(Axis(2))
            .unwrap()
            .insert_axis(Axis(2))
            .insert_axis(Axis(3));
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, pv, _| {
                let scale = 1.0 / (h * w) as f64;
                let gb = g.broadcast(pv[0].raw_dim()).unwrap();
                vec![gb.mapv(|v| v * scale)]
            })),
            None,
        )
    }

    /// Elementwise product with numpy-style broadcasting on size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let dims = broadcast_dims(self.shape(a), self.shape(b));
        let (av, bv) = (self.value(a), self.value(b));
        let out = &av.broadcast(IxDyn(&dims)).unwrap() * &bv.broadcast(IxDyn(&dims)).unwrap();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, pv, _| {
                let gb = g.broadcast(IxDyn(&dims)).unwrap();
                let da = reduce_to(&gb * &pv[1].broadcast(IxDyn(&dims)).unwrap(), pv[0].shape());
                let db = reduce_to(&gb * &pv[0].broadcast(IxDyn(&dims)).unwrap(), pv[1].shape());
                vec![da, db]
            })),
            None,
        )
    }

    /// Elementwise sum with numpy-style broadcasting on size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let dims = broadcast_dims(self.shape(a), self.shape(b));
        let (av, bv) = (self.value(a), self.value(b));
        let out = &av.broadcast(IxDyn(&dims)).unwrap() + &bv.broadcast(IxDyn(&dims)).unwrap();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, pv, _| {
                vec![reduce_to(g.clone(), pv[0].shape()), reduce_to(g.clone(), pv[1].shape())]
            })),
            None,
        )
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).mapv(|a| a * c);
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _| vec![g.mapv(|v| v * c)])),
            None,
        )
    }

    /// Concatenation along the channel axis of `(B,C,H,W)` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        let channels: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut offset = 0;
                channels
                    .iter()
                    .map(|&c| {
                        let piece = g
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                            .to_owned();
                        offset += c;
                        piece
                    })
                    .collect()
            })),
            None,
        )
    }

    /// Mean over all elements, producing a scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        let m = xv.sum() / n as f64;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), m),
            vec![x],
            Some(Box::new(move |g, pv, _| {
                let gs = g.iter().next().copied().unwrap() / n as f64;
                vec![ArrayD::from_elem(pv[0].raw_dim(), gs)]
            })),
            None,
        )
    }

    /// Sum over all elements, producing a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![x],
            Some(Box::new(move |g, pv, _| {
                let gs = g.iter().next().copied().unwrap();
                vec![ArrayD::from_elem(pv[0].raw_dim(), gs)]
            })),
            None,
        )
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
