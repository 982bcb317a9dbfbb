//! Tape operations and their backward rules.
//!
//! Backward rules only ever build further tape operations (piecewise-constant
//! factors such as activation masks enter as detached constants), which keeps
//! gradients differentiable to any order.

use crate::conv::{self, ConvGeom, GatherMap};
use crate::scalar::Scalar;
use crate::tape::{reshape_std, Tape, Var};
use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice};
use std::sync::Arc;

#[derive(Clone)]
pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    /// y = mul * x + add
    Affine {
        x: usize,
        mul: S,
        add: S,
    },
    Powf {
        x: usize,
        p: S,
    },
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    LeakyRelu {
        x: usize,
        slope: S,
    },
    /// 2-D matrix product
    Matmul {
        a: usize,
        b: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Reshape {
        x: usize,
        from: Vec<usize>,
    },
    BroadcastTo {
        x: usize,
        from: Vec<usize>,
    },
    SumToShape {
        x: usize,
        from: Vec<usize>,
    },
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    Im2col {
        x: usize,
        geom: ConvGeom,
    },
    Col2im {
        x: usize,
        geom: ConvGeom,
    },
    /// Nearest-neighbor 2x spatial upsampling, NCHW
    Upsample2(usize),
    /// 2x2 stride-2 sum pooling, NCHW (adjoint of Upsample2)
    SumPool2(usize),
    Gather {
        x: usize,
        map: Arc<GatherMap>,
    },
    Scatter {
        x: usize,
        map: Arc<GatherMap>,
    },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Matmul { a, b } | Op::Concat { a, b, .. } => {
                vec![a, b]
            }
            Op::Neg(x)
            | Op::Affine { x, .. }
            | Op::Powf { x, .. }
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Sigmoid(x)
            | Op::LeakyRelu { x, .. }
            | Op::Permute { x, .. }
            | Op::Reshape { x, .. }
            | Op::BroadcastTo { x, .. }
            | Op::SumToShape { x, .. }
            | Op::Im2col { x, .. }
            | Op::Col2im { x, .. }
            | Op::Upsample2(x)
            | Op::SumPool2(x)
            | Op::Gather { x, .. }
            | Op::Scatter { x, .. } => vec![x],
        }
    }

    /// Gradient contributions to each parent given the node's output gradient.
    pub(crate) fn backward<'t>(
        &self,
        tape: &'t Tape<S>,
        out: Var<'t, S>,
        grad: Var<'t, S>,
    ) -> Vec<(usize, Var<'t, S>)> {
        let var = |id: usize| Var { tape, id };
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, grad), (*b, grad)],
            Op::Mul(a, b) => vec![(*a, grad.mul(var(*b))), (*b, grad.mul(var(*a)))],
            Op::Neg(x) => vec![(*x, grad.neg())],
            Op::Affine { x, mul, .. } => vec![(*x, grad.affine(*mul, S::zero()))],
            Op::Powf { x, p } => {
                let dx = var(*x).powf(*p - S::one()).affine(*p, S::zero());
                vec![(*x, grad.mul(dx))]
            }
            Op::Exp(x) => vec![(*x, grad.mul(out))],
            Op::Ln(x) => vec![(*x, grad.mul(var(*x).powf(-S::one())))],
            Op::Sigmoid(x) => {
                let one_minus = out.affine(-S::one(), S::one());
                vec![(*x, grad.mul(out.mul(one_minus)))]
            }
            Op::LeakyRelu { x, slope } => {
                let mask = out.with_value_of(*x, |xs| {
                    xs.mapv(|v| if v > S::zero() { S::one() } else { *slope })
                });
                let mask = tape.constant(mask);
                vec![(*x, grad.mul(mask))]
            }
            Op::Matmul { a, b } => {
                let ga = grad.matmul(var(*b).t());
                let gb = var(*a).t().matmul(grad);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                vec![(*x, grad.permute(&inverse))]
            }
            Op::Reshape { x, from } => vec![(*x, grad.reshape(from))],
            Op::BroadcastTo { x, from } => vec![(*x, grad.sum_to_shape(from))],
            Op::SumToShape { x, from } => vec![(*x, grad.broadcast_to(from))],
            Op::Concat { a, b, axis } => {
                let a_len = tape.nodes.borrow()[*a].value.shape()[*axis];
                let b_len = tape.nodes.borrow()[*b].value.shape()[*axis];
                vec![
                    (*a, grad.slice_axis(*axis, 0, a_len)),
                    (*b, grad.slice_axis(*axis, a_len, b_len)),
                ]
            }
            Op::Im2col { x, geom } => vec![(*x, grad.col2im(*geom))],
            Op::Col2im { x, geom } => vec![(*x, grad.im2col(*geom))],
            Op::Upsample2(x) => vec![(*x, grad.sumpool2())],
            Op::SumPool2(x) => vec![(*x, grad.upsample2())],
            Op::Gather { x, map } => vec![(*x, grad.scatter(map.clone()))],
            Op::Scatter { x, map } => vec![(*x, grad.gather(map.clone()))],
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    fn unary(self, value: ArrayD<S>, op: Op<S>) -> Var<'t, S> {
        let req = self.requires_grad();
        self.tape.push(value, op, req)
    }

    fn binary(self, other: Var<'t, S>, value: ArrayD<S>, op: Op<S>) -> Var<'t, S> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let req = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, req)
    }

    pub(crate) fn with_value_of<R>(self, id: usize, f: impl FnOnce(&ArrayD<S>) -> R) -> R {
        f(&self.tape.nodes.borrow()[id].value)
    }

    pub fn add(self, other: Var<'t, S>) -> Var<'t, S> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
            a + b
        };
        self.binary(other, value, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, S>) -> Var<'t, S> {
        self.add(other.neg())
    }

    pub fn mul(self, other: Var<'t, S>) -> Var<'t, S> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
            a * b
        };
        self.binary(other, value, Op::Mul(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t, S> {
        let value = self.with_value(|v| v.mapv(|x| -x));
        self.unary(value, Op::Neg(self.id))
    }

    /// `mul * self + add`, elementwise with scalar coefficients.
    pub fn affine(self, mul: S, add: S) -> Var<'t, S> {
        let value = self.with_value(|v| v.mapv(|x| mul * x + add));
        self.unary(value, Op::Affine { x: self.id, mul, add })
    }

    pub fn powf(self, p: S) -> Var<'t, S> {
        let value = self.with_value(|v| v.mapv(|x| x.powf(p)));
        self.unary(value, Op::Powf { x: self.id, p })
    }

    pub fn sqrt(self) -> Var<'t, S> {
        self.powf(S::from_f64(0.5))
    }

    pub fn square(self) -> Var<'t, S> {
        self.mul(self)
    }

    pub fn exp(self) -> Var<'t, S> {
        let value = self.with_value(|v| v.mapv(|x| x.exp()));
        self.unary(value, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t, S> {
        let value = self.with_value(|v| v.mapv(|x| x.ln()));
        self.unary(value, Op::Ln(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        let value = self.with_value(|v| {
            v.mapv(|x| {
                // split by sign to avoid overflowing exp
                if x >= S::zero() {
                    S::one() / (S::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (S::one() + e)
                }
            })
        });
        self.unary(value, Op::Sigmoid(self.id))
    }

    pub fn leaky_relu(self, slope: S) -> Var<'t, S> {
        let value = self.with_value(|v| v.mapv(|x| if x > S::zero() { x } else { slope * x }));
        self.unary(value, Op::LeakyRelu { x: self.id, slope })
    }

    pub fn relu(self) -> Var<'t, S> {
        self.leaky_relu(S::zero())
    }

    pub fn matmul(self, other: Var<'t, S>) -> Var<'t, S> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            assert_eq!(a.ndim(), 2, "matmul: lhs must be 2-d");
            assert_eq!(b.ndim(), 2, "matmul: rhs must be 2-d");
            assert_eq!(a.shape()[1], b.shape()[0], "matmul: inner dims differ");
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            a2.dot(&b2).into_dyn()
        };
        self.binary(
            other,
            value,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// 2-D transpose.
    pub fn t(self) -> Var<'t, S> {
        self.permute(&[1, 0])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, S> {
        let value = self.with_value(|v| {
            assert_eq!(axes.len(), v.ndim(), "permute: axes rank mismatch");
            v.view()
                .permuted_axes(IxDyn(axes))
                .as_standard_layout()
                .to_owned()
        });
        self.unary(
            value,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn reshape(self, dims: &[usize]) -> Var<'t, S> {
        let from = self.shape();
        let value = reshape_std(self.value(), dims);
        self.unary(value, Op::Reshape { x: self.id, from })
    }

    /// Numpy-style (right-aligned) broadcast to `dims`.
    pub fn broadcast_to(self, dims: &[usize]) -> Var<'t, S> {
        let from = self.shape();
        let value = self.with_value(|v| {
            v.broadcast(IxDyn(dims))
                .unwrap_or_else(|| panic!("broadcast_to: {:?} -> {:?}", v.shape(), dims))
                .as_standard_layout()
                .to_owned()
        });
        self.unary(value, Op::BroadcastTo { x: self.id, from })
    }

    /// Adjoint of `broadcast_to`: sum over broadcast axes down to `dims`.
    pub fn sum_to_shape(self, dims: &[usize]) -> Var<'t, S> {
        let from = self.shape();
        let value = self.with_value(|v| sum_to_shape_value(v, dims));
        self.unary(value, Op::SumToShape { x: self.id, from })
    }

    pub fn sum_all(self) -> Var<'t, S> {
        self.sum_to_shape(&[])
    }

    pub fn mean_all(self) -> Var<'t, S> {
        let n = self.numel();
        self.sum_all()
            .affine(S::from_f64(1.0 / n as f64), S::zero())
    }

    pub fn concat(self, other: Var<'t, S>, axis: usize) -> Var<'t, S> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            concatenate(Axis(axis), &[a.view(), b.view()]).expect("concat: incompatible shapes")
        };
        self.binary(
            other,
            value,
            Op::Concat {
                a: self.id,
                b: other.id,
                axis,
            },
        )
    }

    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Var<'t, S> {
        let value = self.with_value(|v| {
            v.slice_axis(Axis(axis), Slice::from(start..start + len))
                .as_standard_layout()
                .to_owned()
        });
        // Backward embeds the slice gradient back at the right offset; a gather
        // map records exactly which input elements were taken.
        let map = self.with_value(|v| conv::slice_gather_map(v.shape(), axis, start, len));
        self.unary(
            value,
            Op::Gather {
                x: self.id,
                map: Arc::new(map),
            },
        )
    }

    pub fn im2col(self, geom: ConvGeom) -> Var<'t, S> {
        let value = self.with_value(|v| conv::im2col(v, geom));
        self.unary(value, Op::Im2col { x: self.id, geom })
    }

    pub fn col2im(self, geom: ConvGeom) -> Var<'t, S> {
        let value = self.with_value(|v| conv::col2im(v, geom));
        self.unary(value, Op::Col2im { x: self.id, geom })
    }

    pub fn upsample2(self) -> Var<'t, S> {
        let value = self.with_value(conv::upsample2);
        self.unary(value, Op::Upsample2(self.id))
    }

    pub fn sumpool2(self) -> Var<'t, S> {
        let value = self.with_value(conv::sumpool2);
        self.unary(value, Op::SumPool2(self.id))
    }

    pub fn gather(self, map: Arc<GatherMap>) -> Var<'t, S> {
        let value = self.with_value(|v| conv::gather(v, &map));
        self.unary(value, Op::Gather { x: self.id, map })
    }

    pub fn scatter(self, map: Arc<GatherMap>) -> Var<'t, S> {
        let value = self.with_value(|v| conv::scatter(v, &map));
        self.unary(value, Op::Scatter { x: self.id, map })
    }
}

/// Sum `v` down to a right-aligned broadcast-compatible `dims`.
fn sum_to_shape_value<S: Scalar>(v: &ArrayD<S>, dims: &[usize]) -> ArrayD<S> {
    let mut cur = v.to_owned();
    while cur.ndim() > dims.len() {
        cur = cur.sum_axis(Axis(0));
    }
    for ax in 0..dims.len() {
        if dims[ax] == 1 && cur.shape()[ax] != 1 {
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        } else {
            assert_eq!(
                dims[ax],
                cur.shape()[ax],
                "sum_to_shape: {:?} not reducible to {:?}",
                v.shape(),
                dims
            );
        }
    }
    crate::tape::standardize(cur)
}
