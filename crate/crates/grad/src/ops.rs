//! Differentiable primitives on [`Var`].
//!
//! Each backward rule is expressed through these same primitives, which is
//! what makes second-order gradients available.

use std::sync::Arc;

use crate::graph::Var;
use crate::tensor::{broadcast_shape, Tensor};

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl Var {
    fn same_shape_pair(&self, other: &Var) -> (Var, Var) {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return (self.clone(), other.clone());
        }
        let target = broadcast_shape(&sa, &sb)
            .unwrap_or_else(|| panic!("shapes {sa:?} and {sb:?} do not broadcast"));
        (self.broadcast_to(&target), other.broadcast_to(&target))
    }

    pub fn add(&self, other: &Var) -> Var {
        let (a, b) = self.same_shape_pair(other);
        let value = a.value().zip(&b.value(), |x, y| x + y);
        self.graph()
            .record(value, &[&a, &b], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (a, b) = self.same_shape_pair(other);
        let value = a.value().zip(&b.value(), |x, y| x - y);
        self.graph()
            .record(value, &[&a, &b], |g, _, _| vec![Some(g.clone()), Some(g.neg())])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (a, b) = self.same_shape_pair(other);
        let value = a.value().zip(&b.value(), |x, y| x * y);
        self.graph().record(value, &[&a, &b], |g, inputs, _| {
            vec![Some(g.mul(&inputs[1])), Some(g.mul(&inputs[0]))]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        let (a, b) = self.same_shape_pair(other);
        let value = a.value().zip(&b.value(), |x, y| x / y);
        self.graph().record(value, &[&a, &b], |g, inputs, out| {
            let ga = g.div(&inputs[1]);
            let gb = g.mul(out).div(&inputs[1]).neg();
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn neg(&self) -> Var {
        let value = self.value().map(|x| -x);
        self.graph().record(value, &[self], |g, _, _| vec![Some(g.neg())])
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        let value = self.value().map(move |x| x + c);
        self.graph().record(value, &[self], |g, _, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, c: f32) -> Var {
        let value = self.value().map(move |x| x * c);
        self.graph()
            .record(value, &[self], move |g, _, _| vec![Some(g.mul_scalar(c))])
    }

    /// Multiply by a constant tensor of the same shape.
    pub fn mul_const(&self, c: &Tensor) -> Var {
        let value = self.value().zip(c, |x, y| x * y);
        let c = c.clone();
        self.graph()
            .record(value, &[self], move |g, _, _| vec![Some(g.mul_const(&c))])
    }

    pub fn exp(&self) -> Var {
        let value = self.value().map(f32::exp);
        self.graph().record(value, &[self], |g, _, out| vec![Some(g.mul(out))])
    }

    pub fn ln(&self) -> Var {
        let value = self.value().map(f32::ln);
        self.graph()
            .record(value, &[self], |g, inputs, _| vec![Some(g.div(&inputs[0]))])
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().map(f32::tanh);
        self.graph().record(value, &[self], |g, _, out| {
            let d = out.mul(out).neg().add_scalar(1.0);
            vec![Some(g.mul(&d))]
        })
    }

    pub fn powf(&self, p: f32) -> Var {
        let value = self.value().map(move |x| x.powf(p));
        self.graph().record(value, &[self], move |g, inputs, _| {
            let d = inputs[0].powf(p - 1.0).mul_scalar(p);
            vec![Some(g.mul(&d))]
        })
    }

    /// Correctly rounded square root.
    pub fn sqrt(&self) -> Var {
        let value = self.value().map(f32::sqrt);
        self.graph().record(value, &[self], |g, _, out| {
            vec![Some(g.div(out).mul_scalar(0.5))]
        })
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn relu(&self) -> Var {
        let x = self.value();
        let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let value = x.map(|v| v.max(0.0));
        self.graph()
            .record(value, &[self], move |g, _, _| vec![Some(g.mul_const(&mask))])
    }

    pub fn abs(&self) -> Var {
        let x = self.value();
        let sign = x.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
        let value = x.map(f32::abs);
        self.graph()
            .record(value, &[self], move |g, _, _| vec![Some(g.mul_const(&sign))])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let in_shape = self.shape();
        if in_shape == shape {
            return self.clone();
        }
        let value = self.value().broadcast_to(shape);
        self.graph()
            .record(value, &[self], move |g, _, _| vec![Some(g.sum_to(&in_shape))])
    }

    /// Sum broadcast dimensions away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        let in_shape = self.shape();
        if in_shape == shape {
            return self.clone();
        }
        let value = self.value().sum_to(shape);
        self.graph()
            .record(value, &[self], move |g, _, _| vec![Some(g.broadcast_to(&in_shape))])
    }

    /// Sum of every element, as a rank-0 value.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f32;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over `axis`, keeping it with size one.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let mut shape = self.shape();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let n = self.shape()[axis] as f32;
        self.sum_axis(axis).mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let in_shape = self.shape();
        if in_shape == shape {
            return self.clone();
        }
        let value = self.value().reshape(shape);
        self.graph()
            .record(value, &[self], move |g, _, _| vec![Some(g.reshape(&in_shape))])
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return self.clone();
        }
        let value = self.value().permute(axes);
        let inv = inverse_axes(axes);
        self.graph()
            .record(value, &[self], move |g, _, _| vec![Some(g.permute(&inv))])
    }

    /// Swap the last two axes.
    pub fn t(&self) -> Var {
        let r = self.shape().len();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// Matrix product. A rank-2 right operand is shared across the leading
    /// dimensions of `self`; otherwise batch dimensions must match.
    pub fn matmul(&self, other: &Var) -> Var {
        let (sa, sb) = (self.shape(), other.shape());
        if sb.len() == 2 && sa.len() > 2 {
            let k = sa[sa.len() - 1];
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let flat = self.reshape(&[rows, k]).matmul(other);
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(sb[1]);
            return flat.reshape(&out_shape);
        }
        let value = self.value().matmul(&other.value());
        self.graph().record(value, &[self, other], |g, inputs, _| {
            let ga = g.matmul(&inputs[1].t());
            let gb = inputs[0].t().matmul(g);
            vec![Some(ga), Some(gb)]
        })
    }

    /// `out[i] = self.flat[index[i]]`; [`crate::PAD_INDEX`] yields zero.
    pub fn gather(&self, index: Arc<Vec<u32>>, shape: &[usize]) -> Var {
        let in_shape = self.shape();
        let value = self.value().gather(&index, shape);
        self.graph().record(value, &[self], move |g, _, _| {
            vec![Some(g.scatter_add(Arc::clone(&index), &in_shape))]
        })
    }

    /// Adjoint of [`Var::gather`].
    pub fn scatter_add(&self, index: Arc<Vec<u32>>, shape: &[usize]) -> Var {
        let in_shape = self.shape();
        let value = self.value().scatter_add(&index, shape);
        self.graph().record(value, &[self], move |g, _, _| {
            vec![Some(g.gather(Arc::clone(&index), &in_shape))]
        })
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                index.extend((base..base + inner).map(|i| i as u32));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(Arc::new(index), &out_shape)
    }

    /// Concatenate along `axis`.
    pub fn cat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = parts[0].shape();
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut offset = 0;
        let mut acc: Option<Var> = None;
        for p in parts {
            let len = p.shape()[axis];
            let mut index = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * total + offset + a) * inner;
                    index.extend((base..base + inner).map(|i| i as u32));
                }
            }
            let placed = p.scatter_add(Arc::new(index), &out_shape);
            acc = Some(match acc {
                Some(a) => a.add(&placed),
                None => placed,
            });
            offset += len;
        }
        acc.unwrap()
    }
}

impl std::ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl std::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl std::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

impl std::ops::Div for &Var {
    type Output = Var;
    fn div(self, rhs: &Var) -> Var {
        Var::div(self, rhs)
    }
}

impl std::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}
