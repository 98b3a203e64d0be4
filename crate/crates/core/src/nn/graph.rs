//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Nodes that do
//! not depend on a trainable leaf record no backward closure, so frozen
//! sub-networks cost only their forward pass. [`Graph::backward`] walks the tape
//! in reverse and returns gradients for every leaf that required one.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{Real, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut Grads<T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    fn add(&mut self, id: usize, g: Tensor<T>) {
        match &mut self.slots[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.slots.get(v.id).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.slots.get_mut(v.id).and_then(|s| s.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor<T>,
        needs_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            needs_grad,
            backward: if needs_grad { backward } else { None },
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, false, None)
    }

    pub fn leaf(&self, t: Tensor<T>, trainable: bool) -> Var<'_, T> {
        self.push(t, trainable, None)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse pass seeded with ones at `root` (normally a one-element loss).
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let n = self.len();
        let mut grads = Grads {
            slots: (0..n).map(|_| None).collect(),
        };
        let shape = self.value_of(root.id).shape().to_vec();
        grads.slots[root.id] = Some(Tensor::full(&shape, T::one()));
        let nodes = self.nodes.borrow();
        for id in (0..=root.id).rev() {
            let Some(back) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            back(&g, &mut grads);
        }
        grads
    }
}

fn unary<'g, T: Real>(
    x: Var<'g, T>,
    value: Tensor<T>,
    back: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
) -> Var<'g, T> {
    let xi = x.id;
    let need = x.graph.needs(xi);
    x.graph.push(
        value,
        need,
        Some(Box::new(move |g, grads| grads.add(xi, back(g)))),
    )
}

#[allow(clippy::should_implement_trait)]
impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn binary_needs(&self, other: &Var<'g, T>) -> (bool, bool) {
        (self.needs_grad(), other.needs_grad())
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (na, nb) = self.binary_needs(&other);
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        let (ai, bi) = (self.id, other.id);
        self.graph.push(
            v,
            na || nb,
            Some(Box::new(move |g, grads| {
                if na {
                    grads.add(ai, g.clone());
                }
                if nb {
                    grads.add(bi, g.clone());
                }
            })),
        )
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (na, nb) = self.binary_needs(&other);
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        let (ai, bi) = (self.id, other.id);
        self.graph.push(
            v,
            na || nb,
            Some(Box::new(move |g, grads| {
                if na {
                    grads.add(ai, g.clone());
                }
                if nb {
                    grads.add(bi, g.map(|x| -x));
                }
            })),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (na, nb) = self.binary_needs(&other);
        let (av, bv) = (self.value(), other.value());
        let v = av.zip_map(&bv, |a, b| a * b);
        let (ai, bi) = (self.id, other.id);
        self.graph.push(
            v,
            na || nb,
            Some(Box::new(move |g, grads| {
                if na {
                    grads.add(ai, g.zip_map(&bv, |g, b| g * b));
                }
                if nb {
                    grads.add(bi, g.zip_map(&av, |g, a| g * a));
                }
            })),
        )
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x * c);
        unary(self, v, move |g| g.map(|x| x * c))
    }

    pub fn add_const(self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x + c);
        unary(self, v, |g| g.clone())
    }

    /// Multiplies every element by the single element of `s`.
    pub fn mul_scalar(self, s: Var<'g, T>) -> Var<'g, T> {
        assert_eq!(
            s.value().len(),
            1,
            "mul_scalar expects a one-element tensor"
        );
        let (na, ns) = self.binary_needs(&s);
        let xv = self.value();
        let sv = s.value().data()[0];
        let v = xv.map(|x| x * sv);
        let (xi, si) = (self.id, s.id);
        self.graph.push(
            v,
            na || ns,
            Some(Box::new(move |g, grads| {
                if na {
                    grads.add(xi, g.map(|x| x * sv));
                }
                if ns {
                    let d: T = g.data().iter().zip(xv.data()).map(|(&g, &x)| g * x).sum();
                    grads.add(si, Tensor::scalar(d));
                }
            })),
        )
    }

    /// Multiplies sample `i` of a batch-leading tensor by the constant `coef[i]`.
    pub fn scale_batch(self, coef: &[T]) -> Var<'g, T> {
        let xv = self.value();
        let b = xv.dim(0);
        assert_eq!(coef.len(), b, "scale_batch coefficient count");
        let per = xv.len() / b;
        let coef = coef.to_vec();
        let apply = move |t: &Tensor<T>| {
            let mut out = t.clone();
            for (i, chunk) in out.data_mut().chunks_mut(per).enumerate() {
                for v in chunk {
                    *v = *v * coef[i];
                }
            }
            out
        };
        let v = apply(&xv);
        unary(self, v, apply)
    }

    pub fn square(self) -> Var<'g, T> {
        let xv = self.value();
        let v = xv.map(|x| x * x);
        let two = T::from_f64c(2.0);
        unary(self, v, move |g| g.zip_map(&xv, |g, x| g * two * x))
    }

    pub fn exp(self) -> Var<'g, T> {
        let v = self.value().map(|x| x.exp());
        let out = v.clone();
        unary(self, v, move |g| g.zip_map(&out, |g, y| g * y))
    }

    pub fn silu(self) -> Var<'g, T> {
        let xv = self.value();
        let v = xv.map(|x| x / (T::one() + (-x).exp()));
        unary(self, v, move |g| {
            g.zip_map(&xv, |g, x| {
                let s = T::one() / (T::one() + (-x).exp());
                g * s * (T::one() + x * (T::one() - s))
            })
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let v = Tensor::scalar(xv.sum());
        unary(self, v, move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::from_usize(self.value().len()).unwrap();
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        let v = (*xv).clone().reshape(shape);
        unary(self, v, move |g| g.clone().reshape(&old))
    }

    /// `[M,K]·[K,N]`.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (na, nb) = self.binary_needs(&other);
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
        assert_eq!(bv.dim(0), k, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            av.data(),
            k as isize,
            1,
            bv.data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let (ai, bi) = (self.id, other.id);
        self.graph.push(
            out,
            na || nb,
            Some(Box::new(move |g, grads| {
                if na {
                    // dA = G·Bᵀ
                    let mut da = Tensor::zeros(&[m, k]);
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::zero(),
                        da.data_mut(),
                        k as isize,
                        1,
                    );
                    grads.add(ai, da);
                }
                if nb {
                    // dB = Aᵀ·G
                    let mut db = Tensor::zeros(&[k, n]);
                    T::gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        db.data_mut(),
                        n as isize,
                        1,
                    );
                    grads.add(bi, db);
                }
            })),
        )
    }

    pub fn transpose(self) -> Var<'g, T> {
        let xv = self.value();
        let (r, c) = (xv.dim(0), xv.dim(1));
        let v = transpose2(&xv, r, c);
        unary(self, v, move |g| transpose2(g, c, r))
    }

    /// Adds `bias[N]` to every row of `[M,N]`.
    pub fn add_row_bias(self, bias: Var<'g, T>) -> Var<'g, T> {
        let (na, nb) = self.binary_needs(&bias);
        let xv = self.value();
        let bv = bias.value();
        let n = bv.len();
        assert_eq!(*xv.shape().last().unwrap(), n, "row bias width");
        let mut v = (*xv).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x = *x + b;
            }
        }
        let (xi, bi) = (self.id, bias.id);
        let bshape = bv.shape().to_vec();
        self.graph.push(
            v,
            na || nb,
            Some(Box::new(move |g, grads| {
                if na {
                    grads.add(xi, g.clone());
                }
                if nb {
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    grads.add(bi, Tensor::new(bshape.clone(), db));
                }
            })),
        )
    }

    /// Linear layer: `x[B,In]·w[In,Out] + b[Out]`.
    pub fn linear(self, w: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
        self.matmul(w).add_row_bias(b)
    }

    /// Row-wise L2 normalisation of a `[B,D]` tensor.
    pub fn l2_normalize(self) -> Var<'g, T> {
        let xv = self.value();
        let d = *xv.shape().last().unwrap();
        let norms: Vec<T> = xv
            .data()
            .chunks(d)
            .map(|r| {
                r.iter()
                    .map(|&v| v * v)
                    .sum::<T>()
                    .sqrt()
                    .max(T::min_positive_value())
            })
            .collect();
        let mut y = (*xv).clone();
        for (row, &nrm) in y.data_mut().chunks_mut(d).zip(&norms) {
            for v in row {
                *v = *v / nrm;
            }
        }
        let yv = y.clone();
        unary(self, y, move |g| {
            let mut dx = g.clone();
            for ((drow, yrow), &nrm) in dx
                .data_mut()
                .chunks_mut(d)
                .zip(yv.data().chunks(d))
                .zip(&norms)
            {
                let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (dv, &yy) in drow.iter_mut().zip(yrow) {
                    *dv = (*dv - yy * dot) / nrm;
                }
            }
            dx
        })
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'g, T> {
        let xv = self.value();
        let (b, n) = (xv.dim(0), xv.dim(1));
        assert_eq!(targets.len(), b, "one target per row");
        let mut probs = vec![T::zero(); b * n];
        let mut loss = T::zero();
        for (i, row) in xv.data().chunks(n).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss = loss + lse - row[targets[i]];
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
        }
        let bt = T::from_usize(b).unwrap();
        let targets = targets.to_vec();
        unary(self, Tensor::scalar(loss / bt), move |g| {
            let s = g.data()[0] / bt;
            let mut d = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                d[i * n + t] = d[i * n + t] - T::one();
            }
            Tensor::new(vec![b, n], d.into_iter().map(|v| v * s).collect())
        })
    }

    /// Selects rows of a `[L,D]` table.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'g, T> {
        let tv = self.value();
        let (l, d) = (tv.dim(0), tv.dim(1));
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < l, "row index {i} out of range {l}");
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let idx = idx.to_vec();
        unary(self, Tensor::new(vec![idx.len(), d], out), move |g| {
            let mut dt = Tensor::zeros(&[l, d]);
            for (r, &i) in idx.iter().enumerate() {
                let src = &g.data()[r * d..(r + 1) * d];
                for (a, &b) in dt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *a = *a + b;
                }
            }
            dt
        })
    }

    /// Concatenates along `axis`.
    pub fn concat(self, other: Var<'g, T>, axis: usize) -> Var<'g, T> {
        let (na, nb) = self.binary_needs(&other);
        let (av, bv) = (self.value(), other.value());
        let (outer, a_ax, inner) = split_axis(av.shape(), axis);
        let (outer_b, b_ax, inner_b) = split_axis(bv.shape(), axis);
        assert!(
            outer == outer_b && inner == inner_b,
            "concat shape mismatch"
        );
        let mut shape = av.shape().to_vec();
        shape[axis] = a_ax + b_ax;
        let (ca, cb) = (a_ax * inner, b_ax * inner);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * ca..(o + 1) * ca]);
            data.extend_from_slice(&bv.data()[o * cb..(o + 1) * cb]);
        }
        let (ai, bi) = (self.id, other.id);
        let (ashape, bshape) = (av.shape().to_vec(), bv.shape().to_vec());
        self.graph.push(
            Tensor::new(shape, data),
            na || nb,
            Some(Box::new(move |g, grads| {
                let mut da = Vec::with_capacity(outer * ca);
                let mut db = Vec::with_capacity(outer * cb);
                for chunk in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                if na {
                    grads.add(ai, Tensor::new(ashape.clone(), da));
                }
                if nb {
                    grads.add(bi, Tensor::new(bshape.clone(), db));
                }
            })),
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let xv = self.value();
        let (outer, ax, inner) = split_axis(xv.shape(), axis);
        assert!(start + len <= ax, "narrow out of range");
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ax * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let full = xv.shape().to_vec();
        unary(self, Tensor::new(shape, data), move |g| {
            let mut dx = Tensor::zeros(&full);
            for (o, chunk) in g.data().chunks(len * inner).enumerate() {
                let base = o * ax * inner + start * inner;
                dx.data_mut()[base..base + len * inner].copy_from_slice(chunk);
            }
            dx
        })
    }

    /// Mean over all trailing spatial positions of `[B,C,...]` → `[B,C]`.
    pub fn spatial_mean(self) -> Var<'g, T> {
        let xv = self.value();
        let (b, c) = (xv.dim(0), xv.dim(1));
        let p = xv.len() / (b * c);
        let pt = T::from_usize(p).unwrap();
        let v: Vec<T> = xv
            .data()
            .chunks(p)
            .map(|ch| ch.iter().copied().sum::<T>() / pt)
            .collect();
        let shape = xv.shape().to_vec();
        unary(self, Tensor::new(vec![b, c], v), move |g| {
            let mut dx = Vec::with_capacity(b * c * p);
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv / pt, p));
            }
            Tensor::new(shape.clone(), dx)
        })
    }

    /// Max over all trailing spatial positions of `[B,C,...]` → `[B,C]`.
    pub fn spatial_max(self) -> Var<'g, T> {
        let xv = self.value();
        let (b, c) = (xv.dim(0), xv.dim(1));
        let p = xv.len() / (b * c);
        let mut arg = Vec::with_capacity(b * c);
        let mut v = Vec::with_capacity(b * c);
        for ch in xv.data().chunks(p) {
            let (mut bi, mut bv) = (0, ch[0]);
            for (i, &x) in ch.iter().enumerate().skip(1) {
                if x > bv {
                    bi = i;
                    bv = x;
                }
            }
            arg.push(bi);
            v.push(bv);
        }
        let shape = xv.shape().to_vec();
        unary(self, Tensor::new(vec![b, c], v), move |g| {
            let mut dx = Tensor::zeros(&shape);
            for (k, (&gv, &a)) in g.data().iter().zip(&arg).enumerate() {
                dx.data_mut()[k * p + a] = gv;
            }
            dx
        })
    }

    /// Feature-wise modulation `x·(1+scale) + shift` with `scale, shift: [B,C]`.
    pub fn film(self, scale: Var<'g, T>, shift: Var<'g, T>) -> Var<'g, T> {
        let (nx, ns, nb) = (self.needs_grad(), scale.needs_grad(), shift.needs_grad());
        let xv = self.value();
        let (sv, bv) = (scale.value(), shift.value());
        let (b, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(sv.shape(), [b, c], "film scale shape");
        assert_eq!(bv.shape(), [b, c], "film shift shape");
        let p = xv.len() / (b * c);
        let mut v = (*xv).clone();
        for (k, ch) in v.data_mut().chunks_mut(p).enumerate() {
            let (s, t) = (T::one() + sv.data()[k], bv.data()[k]);
            for x in ch {
                *x = *x * s + t;
            }
        }
        let (xi, si, bi) = (self.id, scale.id, shift.id);
        self.graph.push(
            v,
            nx || ns || nb,
            Some(Box::new(move |g, grads| {
                if nx {
                    let mut dx = g.clone();
                    for (k, ch) in dx.data_mut().chunks_mut(p).enumerate() {
                        let s = T::one() + sv.data()[k];
                        for x in ch {
                            *x = *x * s;
                        }
                    }
                    grads.add(xi, dx);
                }
                if ns {
                    let ds: Vec<T> = g
                        .data()
                        .chunks(p)
                        .zip(xv.data().chunks(p))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    grads.add(si, Tensor::new(vec![b, c], ds));
                }
                if nb {
                    let db: Vec<T> = g
                        .data()
                        .chunks(p)
                        .map(|gc| gc.iter().copied().sum())
                        .collect();
                    grads.add(bi, Tensor::new(vec![b, c], db));
                }
            })),
        )
    }

    /// Nearest-neighbour ×2 upsampling of `[B,C,H,W]`.
    pub fn upsample2(self) -> Var<'g, T> {
        let xv = self.value();
        let s = xv.shape();
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[s[0], s[1], 2 * h, 2 * w]);
        {
            let od = out.data_mut();
            for p in 0..bc {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        od[(p * 2 * h + y) * 2 * w + x] = xv.data()[(p * h + y / 2) * w + x / 2];
                    }
                }
            }
        }
        let shape = s.to_vec();
        unary(self, out, move |g| {
            let mut dx = Tensor::zeros(&shape);
            let dd = dx.data_mut();
            for p in 0..bc {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let i = (p * h + y / 2) * w + x / 2;
                        dd[i] = dd[i] + g.data()[(p * 2 * h + y) * 2 * w + x];
                    }
                }
            }
            dx
        })
    }

    /// 2-D convolution over `[B,C,H,W]` with weight `[O,C,KH,KW]` and bias `[O]`.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Var<'g, T>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let (nx, nw, nb) = (self.needs_grad(), weight.needs_grad(), bias.needs_grad());
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let geo = ConvGeom::new(xv.shape(), wv.shape(), stride, pad);
        assert_eq!(bv.len(), geo.o, "conv bias length");
        let (kk, p) = (geo.c * geo.kh * geo.kw, geo.p());
        let in_plane = geo.c * geo.h * geo.w;
        let cols: Rc<Vec<Vec<T>>> = Rc::new(
            (0..geo.b)
                .map(|bi| im2col(&xv.data()[bi * in_plane..(bi + 1) * in_plane], &geo))
                .collect(),
        );
        let mut out = vec![T::zero(); geo.b * geo.o * p];
        for (bi, col) in cols.iter().enumerate() {
            let dst = &mut out[bi * geo.o * p..(bi + 1) * geo.o * p];
            for (oi, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bv.data()[oi]);
            }
            T::gemm(
                geo.o,
                kk,
                p,
                wv.data(),
                kk as isize,
                1,
                col,
                p as isize,
                1,
                T::one(),
                dst,
                p as isize,
                1,
            );
        }
        let out = Tensor::new(vec![geo.b, geo.o, geo.ho, geo.wo], out);
        let (xi, wi, bi_) = (self.id, weight.id, bias.id);
        let wshape = wv.shape().to_vec();
        self.graph.push(
            out,
            nx || nw || nb,
            Some(Box::new(move |g, grads| {
                let op = geo.o * p;
                if nb {
                    let mut db = vec![T::zero(); geo.o];
                    for gb in g.data().chunks(op) {
                        for (d, r) in db.iter_mut().zip(gb.chunks(p)) {
                            *d = *d + r.iter().copied().sum::<T>();
                        }
                    }
                    grads.add(bi_, Tensor::new(vec![geo.o], db));
                }
                if nw {
                    let mut dw = vec![T::zero(); geo.o * kk];
                    for (gb, col) in g.data().chunks(op).zip(cols.iter()) {
                        T::gemm(
                            geo.o,
                            p,
                            kk,
                            gb,
                            p as isize,
                            1,
                            col,
                            1,
                            p as isize,
                            T::one(),
                            &mut dw,
                            kk as isize,
                            1,
                        );
                    }
                    grads.add(wi, Tensor::new(wshape.clone(), dw));
                }
                if nx {
                    let mut dx = vec![T::zero(); geo.b * in_plane];
                    let mut dcols = vec![T::zero(); kk * p];
                    for (bi, gb) in g.data().chunks(op).enumerate() {
                        T::gemm(
                            kk,
                            geo.o,
                            p,
                            wv.data(),
                            1,
                            kk as isize,
                            gb,
                            p as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            p as isize,
                            1,
                        );
                        col2im(&dcols, &geo, &mut dx[bi * in_plane..(bi + 1) * in_plane]);
                    }
                    grads.add(xi, Tensor::new(vec![geo.b, geo.c, geo.h, geo.w], dx));
                }
            })),
        )
    }
}

fn transpose2<T: Real>(t: &Tensor<T>, r: usize, c: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [B,C,H,W], got {x:?}");
        assert_eq!(w.len(), 4, "conv2d weight must be [O,C,KH,KW]");
        assert_eq!(
            x[1], w[1],
            "conv2d channel mismatch: input {x:?}, weight {w:?}"
        );
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d kernel larger than input"
        );
        Self {
            b: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        }
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds patches into `[C·KH·KW, B·HO·WO]`.
/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
fn valid_range(out: usize, inp: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if inp + pad > k {
        ((inp + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// One sample `[C,H,W]` to columns `[C·KH·KW, HO·WO]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.p();
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * p];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.wo + xlo..oy * g.wo + xhi];
                    let ix0 = xlo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        d.copy_from_slice(&src[ix0..ix0 + d.len()]);
                    } else {
                        for (o, v) in d.iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds columns `[C·KH·KW, HO·WO]` back into one sample `[C,H,W]`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.wo + xlo..oy * g.wo + xhi];
                    let ix0 = xlo * g.stride + kx - g.pad;
                    for (d, v) in dst[ix0..].iter_mut().step_by(g.stride).zip(s) {
                        *d = *d + *v;
                    }
                }
            }
        }
    }
}
