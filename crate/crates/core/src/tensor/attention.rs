//! Fused multi-head scaled dot-product attention over packed sequences.
//!
//! Queries, keys and values are `[rows, d_model]` matrices holding several
//! sequences back to back. A [`Segment`] names the query rows and key rows of
//! one sequence; rows of different segments never attend to each other, so
//! no padding or masking tensors are needed.

use super::{Node, NodeId, Op, Scalar, Tensor};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub n_heads: usize,
    pub segments: Vec<Segment>,
    /// Query `i` of a segment only sees keys `0..=i`.
    pub causal: bool,
}

impl AttentionLayout {
    fn visible(&self, seg: &Segment, i: usize) -> usize {
        if self.causal {
            (i + 1).min(seg.k_len)
        } else {
            seg.k_len
        }
    }

    fn prob_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.q_len * s.k_len * self.n_heads)
            .sum()
    }
}

impl<'t, T: Scalar> Tensor<'t, T> {
    /// `softmax(q kᵀ / √d_head) v` per head and per segment. `self` is the query.
    pub fn attention(
        &self,
        k: Tensor<'t, T>,
        v: Tensor<'t, T>,
        layout: &AttentionLayout,
    ) -> Result<Tensor<'t, T>> {
        self.same_tape(&k)?;
        self.same_tape(&v)?;
        let (tq, d) = self.dims2()?;
        let (tk, dk) = k.dims2()?;
        let (tv, dv) = v.dims2()?;
        ensure!(
            d == dk && d == dv,
            Contract,
            "attention widths differ: {d}/{dk}/{dv}"
        );
        ensure!(
            tk == tv,
            Contract,
            "attention: {tk} key rows vs {tv} value rows"
        );
        let h = layout.n_heads;
        ensure!(
            h > 0 && d % h == 0,
            Contract,
            "width {d} not divisible by {h} heads"
        );
        for s in &layout.segments {
            ensure!(
                s.q_start + s.q_len <= tq && s.k_start + s.k_len <= tk,
                Contract,
                "attention segment {s:?} exceeds {tq} query / {tk} key rows"
            );
            ensure!(
                s.k_len > 0 || s.q_len == 0,
                Contract,
                "segment {s:?} has queries but no keys"
            );
        }
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = vec![T::zero(); tq * d];
        let mut probs = vec![T::zero(); layout.prob_len()];
        {
            let qd = self.data();
            let kd = k.data();
            let vd = v.data();
            let mut off = 0;
            let mut scores = Vec::new();
            for seg in &layout.segments {
                for head in 0..h {
                    let col = head * dh;
                    for i in 0..seg.q_len {
                        let vis = layout.visible(seg, i);
                        let qrow = &qd[(seg.q_start + i) * d + col..][..dh];
                        scores.clear();
                        let mut mx = T::neg_infinity();
                        for j in 0..vis {
                            let krow = &kd[(seg.k_start + j) * d + col..][..dh];
                            let s = dot(qrow, krow) * scale;
                            mx = mx.max(s);
                            scores.push(s);
                        }
                        let mut z = T::zero();
                        for s in scores.iter_mut() {
                            *s = (*s - mx).exp();
                            z += *s;
                        }
                        let prow = &mut probs[off + i * seg.k_len..][..seg.k_len];
                        let orow = &mut out[(seg.q_start + i) * d + col..][..dh];
                        for (j, &s) in scores.iter().enumerate() {
                            let p = s / z;
                            prow[j] = p;
                            let vrow = &vd[(seg.k_start + j) * d + col..][..dh];
                            orow.iter_mut().zip(vrow).for_each(|(o, &vv)| *o += p * vv);
                        }
                    }
                    off += seg.q_len * seg.k_len;
                }
            }
        }
        let rg = Self::rg_any(&[self, &k, &v]);
        Ok(self.tape.push(
            vec![tq, d],
            out,
            rg,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                layout: layout.clone(),
                probs,
            },
        ))
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(super) fn backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    (q, k, v): (NodeId, NodeId, NodeId),
    layout: &AttentionLayout,
    probs: &[T],
) {
    let d = nodes[q].shape[1];
    let h = layout.n_heads;
    let dh = d / h;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (qd, kd, vd) = (&nodes[q].data, &nodes[k].data, &nodes[v].data);
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dp = Vec::new();
    let mut off = 0;
    for seg in &layout.segments {
        for head in 0..h {
            let col = head * dh;
            for i in 0..seg.q_len {
                let vis = layout.visible(seg, i);
                let prow = &probs[off + i * seg.k_len..][..seg.k_len];
                let grow = &g[(seg.q_start + i) * d + col..][..dh];
                dp.clear();
                for j in 0..vis {
                    let vrow = &vd[(seg.k_start + j) * d + col..][..dh];
                    dp.push(dot(grow, vrow));
                    let dvrow = &mut dv[(seg.k_start + j) * d + col..][..dh];
                    dvrow
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(a, &gv)| *a += prow[j] * gv);
                }
                let inner = (0..vis).fold(T::zero(), |a, j| a + prow[j] * dp[j]);
                let qrow = &qd[(seg.q_start + i) * d + col..][..dh];
                for j in 0..vis {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &kd[(seg.k_start + j) * d + col..][..dh];
                    let dqrow = &mut dq[(seg.q_start + i) * d + col..][..dh];
                    dqrow
                        .iter_mut()
                        .zip(krow)
                        .for_each(|(a, &kv)| *a += ds * kv);
                    let dkrow = &mut dk[(seg.k_start + j) * d + col..][..dh];
                    dkrow
                        .iter_mut()
                        .zip(qrow)
                        .for_each(|(a, &qv)| *a += ds * qv);
                }
            }
            off += seg.q_len * seg.k_len;
        }
    }
    for (id, delta) in [(q, dq), (k, dk), (v, dv)] {
        super::accumulate(grads, nodes, id, |acc| {
            acc.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b);
        });
    }
}
