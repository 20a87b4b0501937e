//! Encoder forward pass with a recorded tape, and the matching backward pass.
//!
//! Each layer is post-LN:
//!
//! ```text
//! h = LN1(x + Attn(x))
//! y = LN2(h + W2·gelu(W1·h + b1) + b2)
//! ```
//!
//! Queries are processed one at a time, so a query's output never depends on
//! what else is in the batch.

use rayon::prelude::*;

use super::tensor::{add_into, linear, linear_backward};
use super::{LayerParams, ModelParams, Real};
use crate::error::{Error, Result};
use crate::scorer::MaskedQuery;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Real>(u: T) -> T {
    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
    half * u * (T::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<T: Real>(u: T) -> T {
    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
    let t = (c * (u + k * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * u * u)
}

/// Normalizes each row; returns (output, normalized rows, 1/σ per row).
fn layer_norm<T: Real>(x: &[T], rows: usize, gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gain.len();
    let n = T::from_usize(d).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::lit(LN_EPS)).sqrt();
        for i in 0..d {
            let h = (xr[i] - mean) * inv;
            xhat[r * d + i] = h;
            y[r * d + i] = gain[i] * h + bias[i];
        }
        rstd.push(inv);
    }
    (y, xhat, rstd)
}

fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let d = gain.len();
    let n = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    for (r, &inv) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut sum_dh = T::zero();
        let mut sum_dh_x = T::zero();
        for i in 0..d {
            dgain[i] = dgain[i] + dyr[i] * xr[i];
            dbias[i] = dbias[i] + dyr[i];
            let dh = dyr[i] * gain[i];
            sum_dh = sum_dh + dh;
            sum_dh_x = sum_dh_x + dh * xr[i];
        }
        let (mean_dh, mean_dh_x) = (sum_dh / n, sum_dh_x / n);
        for i in 0..d {
            let dh = dyr[i] * gain[i];
            dx[r * d + i] = inv * (dh - mean_dh - xr[i] * mean_dh_x);
        }
    }
    dx
}

struct LayerTape<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[head][query position][key position]`
    attn: Vec<T>,
    ctx: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
}

/// Activations of one query's forward pass, kept for backpropagation.
pub struct Tape<T> {
    ids: Vec<u32>,
    mask_positions: Vec<usize>,
    layers: Vec<LayerTape<T>>,
    y: Vec<T>,
    /// softmax output at each mask position
    probs: Vec<Vec<T>>,
    log_probs: Vec<Vec<T>>,
}

impl<T: Real> Tape<T> {
    /// One log-probability vector over the vocabulary per mask position.
    pub fn log_probs(&self) -> &[Vec<T>] {
        &self.log_probs
    }
}

impl<T: Real> ModelParams<T> {
    fn check_query(&self, q: &MaskedQuery) -> Result<()> {
        let c = &self.config;
        if q.ids.len() > c.max_len {
            return Err(Error::Query(format!(
                "length {} exceeds max_len {}",
                q.ids.len(),
                c.max_len
            )));
        }
        if let Some(&id) = q.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::Query(format!(
                "unknown token id {id} (vocab size {})",
                c.vocab_size
            )));
        }
        if let Some(&m) = q.mask_positions.iter().find(|&&m| m >= q.ids.len()) {
            return Err(Error::Query(format!("mask position {m} out of range")));
        }
        Ok(())
    }

    fn layer_forward(&self, p: &LayerParams<T>, x: Vec<T>, n: usize) -> (Vec<T>, LayerTape<T>) {
        let c = &self.config;
        let (d, heads, hd) = (c.dim, c.n_heads, c.head_dim());
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();

        let q = linear(&x, n, &p.wq, &p.bq);
        let k = linear(&x, n, &p.wk, &p.bk);
        let v = linear(&x, n, &p.wv, &p.bv);

        let mut attn = vec![T::zero(); heads * n * n];
        let mut ctx = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..n {
                let qt = &q[t * d + off..t * d + off + hd];
                let row = &mut attn[(h * n + t) * n..(h * n + t + 1) * n];
                let mut max = T::neg_infinity();
                for s in 0..n {
                    let ks = &k[s * d + off..s * d + off + hd];
                    let dot = qt.iter().zip(ks).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    row[s] = dot;
                    max = max.max(dot);
                }
                let mut z = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z = z + *r;
                }
                for r in row.iter_mut() {
                    *r = *r / z;
                }
                let ct = &mut ctx[t * d + off..t * d + off + hd];
                for (s, &a) in row.iter().enumerate() {
                    for (o, &vv) in ct.iter_mut().zip(&v[s * d + off..s * d + off + hd]) {
                        *o = *o + a * vv;
                    }
                }
            }
        }

        let mut r1 = linear(&ctx, n, &p.wo, &p.bo);
        add_into(&mut r1, &x);
        let (h, xhat1, rstd1) = layer_norm(&r1, n, &p.ln1_gain.data, &p.ln1_bias.data);

        let u = linear(&h, n, &p.w1, &p.b1);
        let g: Vec<T> = u.iter().map(|&x| gelu(x)).collect();
        let mut r2 = linear(&g, n, &p.w2, &p.b2);
        add_into(&mut r2, &h);
        let (y, xhat2, rstd2) = layer_norm(&r2, n, &p.ln2_gain.data, &p.ln2_bias.data);

        let tape = LayerTape {
            x,
            q,
            k,
            v,
            attn,
            ctx,
            xhat1,
            rstd1,
            h,
            u,
            g,
            xhat2,
            rstd2,
        };
        (y, tape)
    }

    /// Forward pass for a single query, recording activations.
    pub fn forward_tape(&self, query: &MaskedQuery) -> Result<Tape<T>> {
        self.check_query(query)?;
        let (d, vsz) = (self.config.dim, self.config.vocab_size);
        let n = query.ids.len();

        let mut x = Vec::with_capacity(n * d);
        for (t, &id) in query.ids.iter().enumerate() {
            let tok = self.tok_emb.row(id as usize);
            let pos = self.pos_emb.row(t);
            x.extend(tok.iter().zip(pos).map(|(&a, &b)| a + b));
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            let (y, tape) = self.layer_forward(p, x, n);
            layers.push(tape);
            x = y;
        }

        let mut probs = Vec::with_capacity(query.mask_positions.len());
        let mut log_probs = Vec::with_capacity(query.mask_positions.len());
        for &m in &query.mask_positions {
            let z = linear(&x[m * d..(m + 1) * d], 1, &self.out_w, &self.out_b);
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let lp: Vec<T> = z.iter().map(|&v| v - lse).collect();
            probs.push(lp.iter().map(|&v| v.exp()).collect());
            log_probs.push(lp);
            debug_assert_eq!(log_probs.last().unwrap().len(), vsz);
        }

        Ok(Tape {
            ids: query.ids.clone(),
            mask_positions: query.mask_positions.clone(),
            layers,
            y: x,
            probs,
            log_probs,
        })
    }

    /// Log-probability vectors for every mask position of every query.
    pub fn forward(&self, queries: &[MaskedQuery]) -> Result<Vec<Vec<Vec<T>>>> {
        queries
            .par_iter()
            .map(|q| self.forward_tape(q).map(|t| t.log_probs))
            .collect()
    }

    fn layer_backward(
        &self,
        p: &LayerParams<T>,
        tape: &LayerTape<T>,
        dy: Vec<T>,
        g: &mut LayerParams<T>,
    ) -> Vec<T> {
        let c = &self.config;
        let (d, heads, hd) = (c.dim, c.n_heads, c.head_dim());
        let n = tape.rstd1.len();
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();

        let dr2 = layer_norm_backward(
            &dy,
            &tape.xhat2,
            &tape.rstd2,
            &p.ln2_gain.data,
            &mut g.ln2_gain.data,
            &mut g.ln2_bias.data,
        );
        let dg = linear_backward(&tape.g, n, &p.w2, &dr2, &mut g.w2, &mut g.b2);
        let du: Vec<T> = dg
            .iter()
            .zip(&tape.u)
            .map(|(&a, &u)| a * gelu_grad(u))
            .collect();
        let mut dh = linear_backward(&tape.h, n, &p.w1, &du, &mut g.w1, &mut g.b1);
        add_into(&mut dh, &dr2);

        let dr1 = layer_norm_backward(
            &dh,
            &tape.xhat1,
            &tape.rstd1,
            &p.ln1_gain.data,
            &mut g.ln1_gain.data,
            &mut g.ln1_bias.data,
        );
        let dctx = linear_backward(&tape.ctx, n, &p.wo, &dr1, &mut g.wo, &mut g.bo);

        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dscore = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..n {
                let a = &tape.attn[(h * n + t) * n..(h * n + t + 1) * n];
                let dct = &dctx[t * d + off..t * d + off + hd];
                let mut weighted = T::zero();
                for s in 0..n {
                    let vs = &tape.v[s * d + off..s * d + off + hd];
                    let da = dct.iter().zip(vs).map(|(&x, &y)| x * y).sum::<T>();
                    dscore[s] = da;
                    weighted = weighted + a[s] * da;
                    for (o, &x) in dv[s * d + off..s * d + off + hd].iter_mut().zip(dct) {
                        *o = *o + a[s] * x;
                    }
                }
                for s in 0..n {
                    let ds = a[s] * (dscore[s] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for e in 0..hd {
                        dq[t * d + off + e] = dq[t * d + off + e] + ds * tape.k[s * d + off + e];
                        dk[s * d + off + e] = dk[s * d + off + e] + ds * tape.q[t * d + off + e];
                    }
                }
            }
        }

        let mut dx = dr1;
        add_into(
            &mut dx,
            &linear_backward(&tape.x, n, &p.wq, &dq, &mut g.wq, &mut g.bq),
        );
        add_into(
            &mut dx,
            &linear_backward(&tape.x, n, &p.wk, &dk, &mut g.wk, &mut g.bk),
        );
        add_into(
            &mut dx,
            &linear_backward(&tape.x, n, &p.wv, &dv, &mut g.wv, &mut g.bv),
        );
        dx
    }

    /// Accumulates into `grads` the gradient of `Σ_m upstream[m] · log_prob[m][targets[m]]`.
    pub fn backward_tape(
        &self,
        tape: &Tape<T>,
        targets: &[u32],
        upstream: &[T],
        grads: &mut ModelParams<T>,
    ) -> Result<()> {
        if targets.len() != tape.mask_positions.len() || upstream.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} mask positions, {} targets, {} upstream gradients",
                tape.mask_positions.len(),
                targets.len(),
                upstream.len()
            )));
        }
        let (d, vsz) = (self.config.dim, self.config.vocab_size);
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= vsz) {
            return Err(Error::Query(format!("target id {t} out of range")));
        }
        let n = tape.ids.len();
        let mut dy = vec![T::zero(); n * d];
        for (((&m, probs), &target), &u) in tape
            .mask_positions
            .iter()
            .zip(&tape.probs)
            .zip(targets)
            .zip(upstream)
        {
            if u == T::zero() {
                continue;
            }
            // d log_softmax(z)[c] / dz = onehot(c) - p
            let mut dz: Vec<T> = probs.iter().map(|&p| -u * p).collect();
            dz[target as usize] = dz[target as usize] + u;
            let dym = linear_backward(
                &tape.y[m * d..(m + 1) * d],
                1,
                &self.out_w,
                &dz,
                &mut grads.out_w,
                &mut grads.out_b,
            );
            add_into(&mut dy[m * d..(m + 1) * d], &dym);
        }
        if dy.iter().all(|&v| v == T::zero()) {
            return Ok(());
        }

        for ((p, lt), g) in self
            .layers
            .iter()
            .zip(&tape.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            dy = self.layer_backward(p, lt, dy, g);
        }

        for (t, &id) in tape.ids.iter().enumerate() {
            let dx = &dy[t * d..(t + 1) * d];
            add_into(grads.tok_emb.row_mut(id as usize), dx);
            add_into(grads.pos_emb.row_mut(t), dx);
        }
        Ok(())
    }

    /// Gradient w.r.t. every parameter of
    /// `Σ_q Σ_m upstream[q][m] · log_prob_q[m][candidate_ids[m]]`.
    ///
    /// Per-query gradients are computed in parallel and summed in query order.
    pub fn backward(&self, queries: &[MaskedQuery], upstream: &[Vec<T>]) -> Result<ModelParams<T>> {
        if queries.len() != upstream.len() {
            return Err(Error::Shape(format!(
                "{} queries, {} upstream vectors",
                queries.len(),
                upstream.len()
            )));
        }
        let parts: Vec<ModelParams<T>> = queries
            .par_iter()
            .zip(upstream.par_iter())
            .map(|(q, u)| {
                let tape = self.forward_tape(q)?;
                let mut g = self.zeros_like();
                self.backward_tape(&tape, &q.candidate_ids, u, &mut g)?;
                Ok(g)
            })
            .collect::<Result<_>>()?;
        let mut total = self.zeros_like();
        for g in &parts {
            total.add_scaled(g, T::one());
        }
        Ok(total)
    }
}
