use rand::Rng;

use super::params::{LayerOffsets, ParamLayout, Params};
use super::plan::{Plan, NO_ROW};
use super::real::{gemm, Mat, Real};
use super::{softmax_in_place, PredictionDistribution, PROB_FLOOR};
use crate::error::{Error, Result};

/// Values recorded by a training-mode forward pass for one epoch.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub(crate) inputs: Vec<T>,
    pub(crate) layers: Vec<LayerCache<T>>,
    /// Skip multiplier per layer and channel: 0 (dropped) or 1/(1-p).
    pub(crate) skip_scale: Vec<T>,
    pub(crate) skip_sum: Vec<T>,
    pub(crate) hidden: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> Activations<T> {
    pub fn distribution(&self) -> PredictionDistribution {
        PredictionDistribution {
            probs: self.probs.iter().map(|p| p.as_f64()).collect(),
        }
    }

    /// Summed (masked) skip contributions feeding the output head.
    pub fn skip_sum(&self) -> &[T] {
        &self.skip_sum
    }

    /// Dropout multiplier applied to `channel` of `layer`'s skip output.
    pub fn skip_scale(&self, layer: usize, channel: usize) -> f64 {
        let c = self.skip_sum.len();
        self.skip_scale[layer * c + channel].as_f64()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    x: Vec<T>,
    tanh: Vec<T>,
    gate: Vec<T>,
    z: Vec<T>,
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn relu<T: Real>(x: T) -> T {
    x.max(T::zero())
}

fn block<T>(values: &[T], offset: usize, len: usize) -> &[T] {
    &values[offset..offset + len]
}

fn check_input<T: Real>(params: &Params<T>, samples: &[T], plan: &Plan) -> Result<()> {
    if samples.len() != plan.input_len {
        return Err(Error::ShapeMismatch {
            expected: plan.input_len,
            actual: samples.len(),
        });
    }
    if plan.layers.len() != params.arch.n_layers {
        return Err(Error::ShapeMismatch {
            expected: params.arch.n_layers,
            actual: plan.layers.len(),
        });
    }
    Ok(())
}

fn fill_rows<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.copy_from_slice(bias);
    }
}

/// Runs the embedding and every residual block, returning the summed skip
/// contributions `(n_outputs x C)` at the plan's outputs.
fn run_stack<T: Real>(
    params: &Params<T>,
    layout: &ParamLayout,
    samples: &[T],
    plan: &Plan,
    skip_scale: Option<&[T]>,
    mut cache: Option<&mut Vec<LayerCache<T>>>,
) -> Vec<T> {
    let arch = &params.arch;
    let c = arch.n_filters;
    let k = arch.kernel_size;
    let kc = k * c;
    let w = &params.values;
    let n_out = plan.outputs.len();
    let n_layers = arch.n_layers;

    let embed_w = block(w, layout.embed_w, c);
    let embed_b = block(w, layout.embed_b, c);
    let mut h: Vec<T> = Vec::with_capacity(plan.layers[0].in_pos.len() * c);
    for &p in &plan.layers[0].in_pos {
        let x = samples[p];
        h.extend(embed_w.iter().zip(embed_b).map(|(&wc, &bc)| x * wc + bc));
    }

    let mut skip_sum = vec![T::zero(); n_out * c];
    let mut skip_tmp = vec![T::zero(); n_out * c];
    let mut z_out = vec![T::zero(); n_out * c];
    for (l, lp) in plan.layers.iter().enumerate() {
        let off: &LayerOffsets = &layout.layers[l];
        let n = lp.out_pos.len();

        let mut x = vec![T::zero(); n * kc];
        for r in 0..n {
            for j in 0..k {
                let row = lp.taps[r * k + j];
                if row != NO_ROW {
                    let src = row as usize * c;
                    x[r * kc + j * c..r * kc + (j + 1) * c].copy_from_slice(&h[src..src + c]);
                }
            }
        }
        let mut pre = vec![T::zero(); n * 2 * c];
        fill_rows(&mut pre, block(w, off.conv_b, 2 * c));
        gemm(
            Mat::new(&x, n, kc),
            Mat::new(block(w, off.conv_w, kc * 2 * c), kc, 2 * c),
            &mut pre,
            T::one(),
        );

        let mut tanh = vec![T::zero(); n * c];
        let mut gate = vec![T::zero(); n * c];
        for ((pr, a), g) in pre
            .chunks_exact(2 * c)
            .zip(tanh.chunks_exact_mut(c))
            .zip(gate.chunks_exact_mut(c))
        {
            T::tanh_into(&pr[..c], a);
            T::sigmoid_into(&pr[c..], g);
        }
        let z: Vec<T> = tanh.iter().zip(&gate).map(|(&a, &g)| a * g).collect();

        for (o, &r) in lp.skip_rows.iter().enumerate() {
            z_out[o * c..(o + 1) * c].copy_from_slice(&z[r * c..(r + 1) * c]);
        }
        fill_rows(&mut skip_tmp, block(w, off.skip_b, c));
        gemm(
            Mat::new(&z_out, n_out, c),
            Mat::new(block(w, off.skip_w, c * c), c, c),
            &mut skip_tmp,
            T::one(),
        );
        match skip_scale {
            Some(scale) => {
                let scale = &scale[l * c..(l + 1) * c];
                for (o, s) in skip_tmp.chunks_exact(c).enumerate() {
                    for ch in 0..c {
                        skip_sum[o * c + ch] += s[ch] * scale[ch];
                    }
                }
            }
            None => {
                for (acc, &s) in skip_sum.iter_mut().zip(&skip_tmp) {
                    *acc += s;
                }
            }
        }

        if l + 1 < n_layers {
            let mut next = vec![T::zero(); n * c];
            let res_b = block(w, off.res_b, c);
            for r in 0..n {
                let cur = lp.taps[r * k + k - 1] as usize * c;
                for ch in 0..c {
                    next[r * c + ch] = h[cur + ch] + res_b[ch];
                }
            }
            gemm(
                Mat::new(&z, n, c),
                Mat::new(block(w, off.res_w, c * c), c, c),
                &mut next,
                T::one(),
            );
            h = next;
        }

        if let Some(cache) = cache.as_deref_mut() {
            cache.push(LayerCache { x, tanh, gate, z });
        }
    }
    skip_sum
}

/// Applies `relu -> 1x1 -> relu -> 1x1 -> softmax` to each row of `skip_sum`.
/// Returns (head1 pre-activations, probabilities).
fn run_head<T: Real>(params: &Params<T>, layout: &ParamLayout, skip_sum: &[T]) -> (Vec<T>, Vec<T>) {
    let c = params.arch.n_filters;
    let n_classes = params.arch.n_classes;
    let w = &params.values;
    let rows = skip_sum.len() / c;
    let u: Vec<T> = skip_sum.iter().map(|&v| relu(v)).collect();
    let mut hidden = vec![T::zero(); rows * c];
    fill_rows(&mut hidden, block(w, layout.head1_b, c));
    gemm(
        Mat::new(&u, rows, c),
        Mat::new(block(w, layout.head1_w, c * c), c, c),
        &mut hidden,
        T::one(),
    );
    let act: Vec<T> = hidden.iter().map(|&v| relu(v)).collect();
    let mut logits = vec![T::zero(); rows * n_classes];
    fill_rows(&mut logits, block(w, layout.head2_b, n_classes));
    gemm(
        Mat::new(&act, rows, c),
        Mat::new(block(w, layout.head2_w, c * n_classes), c, n_classes),
        &mut logits,
        T::one(),
    );
    for row in logits.chunks_exact_mut(n_classes) {
        softmax_in_place(row);
    }
    (hidden, logits)
}

/// Deterministic (eval-mode) class distribution at each of the plan's outputs.
pub fn forward_many<T: Real>(
    params: &Params<T>,
    samples: &[T],
    plan: &Plan,
) -> Result<Vec<PredictionDistribution>> {
    check_input(params, samples, plan)?;
    let layout = params.layout();
    let skip_sum = run_stack(params, &layout, samples, plan, None, None);
    let (_, probs) = run_head(params, &layout, &skip_sum);
    Ok(probs
        .chunks_exact(params.arch.n_classes)
        .map(|row| PredictionDistribution {
            probs: row.iter().map(|p| p.as_f64()).collect(),
        })
        .collect())
}

/// Eval-mode distribution for one epoch, read at the last time index.
pub fn forward<T: Real>(
    params: &Params<T>,
    samples: &[T],
    plan: &Plan,
) -> Result<PredictionDistribution> {
    if samples.len() != params.arch.input_len {
        return Err(Error::ShapeMismatch {
            expected: params.arch.input_len,
            actual: samples.len(),
        });
    }
    if plan.outputs != [samples.len() - 1] {
        return Err(Error::Config(
            "forward needs a plan with the last position as its only output".into(),
        ));
    }
    Ok(forward_many(params, samples, plan)?.remove(0))
}

/// Training-mode forward for one epoch: draws a dropout mask and records
/// everything [`backward`] needs.
pub fn forward_train<T: Real, R: Rng + ?Sized>(
    params: &Params<T>,
    samples: &[T],
    plan: &Plan,
    rng: &mut R,
) -> Result<Activations<T>> {
    let c = params.arch.n_filters;
    let p = params.arch.dropout_p;
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..params.arch.n_layers * c)
        .map(|_| {
            if p > 0.0 && rng.random::<f64>() < p {
                T::zero()
            } else {
                scale
            }
        })
        .collect();
    forward_with_mask(params, samples, plan, mask)
}

/// Training-mode forward with an explicit skip multiplier per layer and channel.
pub fn forward_with_mask<T: Real>(
    params: &Params<T>,
    samples: &[T],
    plan: &Plan,
    skip_scale: Vec<T>,
) -> Result<Activations<T>> {
    check_input(params, samples, plan)?;
    if plan.outputs.len() != 1 {
        return Err(Error::Config("training needs a single-output plan".into()));
    }
    let c = params.arch.n_filters;
    if skip_scale.len() != params.arch.n_layers * c {
        return Err(Error::ShapeMismatch {
            expected: params.arch.n_layers * c,
            actual: skip_scale.len(),
        });
    }
    let layout = params.layout();
    let mut layers = Vec::with_capacity(params.arch.n_layers);
    let skip_sum = run_stack(
        params,
        &layout,
        samples,
        plan,
        Some(&skip_scale),
        Some(&mut layers),
    );
    let (hidden, probs) = run_head(params, &layout, &skip_sum);
    let inputs = plan.layers[0].in_pos.iter().map(|&p| samples[p]).collect();
    Ok(Activations {
        inputs,
        layers,
        skip_scale,
        skip_sum,
        hidden,
        probs,
    })
}

fn outer_add<T: Real>(out: &mut [T], left: &[T], right: &[T]) {
    let n = right.len();
    for (i, &l) in left.iter().enumerate() {
        if l == T::zero() {
            continue;
        }
        for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(right) {
            *o += l * r;
        }
    }
}

/// `out[i] = sum_j m[i][j] * v[j]` for row-major `m` with `v.len()` columns.
fn mat_vec<T: Real>(m: &[T], v: &[T]) -> Vec<T> {
    m.chunks_exact(v.len())
        .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn col_sum_add<T: Real>(out: &mut [T], m: &[T]) {
    for row in m.chunks_exact(out.len()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Accumulates the exact cross-entropy gradient (for the recorded dropout
/// mask) into `grads` and returns the loss.
pub fn backward<T: Real>(
    params: &Params<T>,
    plan: &Plan,
    acts: &Activations<T>,
    true_class: usize,
    grads: &mut Params<T>,
) -> Result<f64> {
    let arch = &params.arch;
    let (c, k, n_classes) = (arch.n_filters, arch.kernel_size, arch.n_classes);
    let kc = k * c;
    if true_class >= n_classes {
        return Err(Error::ShapeMismatch {
            expected: n_classes,
            actual: true_class + 1,
        });
    }
    if grads.values.len() != params.values.len() || acts.layers.len() != arch.n_layers {
        return Err(Error::ShapeMismatch {
            expected: params.values.len(),
            actual: grads.values.len(),
        });
    }
    let layout = params.layout();
    let w = &params.values;
    let g = &mut grads.values;

    let loss = -acts.probs[true_class].as_f64().max(PROB_FLOOR).ln();

    let mut dlogits = acts.probs.clone();
    dlogits[true_class] -= T::one();
    let act: Vec<T> = acts.hidden.iter().map(|&v| relu(v)).collect();
    outer_add(
        &mut g[layout.head2_w..layout.head2_w + c * n_classes],
        &act,
        &dlogits,
    );
    col_sum_add(&mut g[layout.head2_b..layout.head2_b + n_classes], &dlogits);
    let dact = mat_vec(block(w, layout.head2_w, c * n_classes), &dlogits);
    let dhidden: Vec<T> = dact
        .iter()
        .zip(&acts.hidden)
        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
        .collect();
    let u: Vec<T> = acts.skip_sum.iter().map(|&v| relu(v)).collect();
    outer_add(&mut g[layout.head1_w..layout.head1_w + c * c], &u, &dhidden);
    col_sum_add(&mut g[layout.head1_b..layout.head1_b + c], &dhidden);
    let du = mat_vec(block(w, layout.head1_w, c * c), &dhidden);
    let dskip_sum: Vec<T> = du
        .iter()
        .zip(&acts.skip_sum)
        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
        .collect();

    // gradient w.r.t. the current block's output rows (the next block's input)
    let mut dh_next: Option<Vec<T>> = None;
    for l in (0..arch.n_layers).rev() {
        let lp = &plan.layers[l];
        let off = &layout.layers[l];
        let cache = &acts.layers[l];
        let n = lp.out_pos.len();

        let mut dz = vec![T::zero(); n * c];
        if let Some(dh) = &dh_next {
            gemm(
                Mat::new(dh, n, c),
                Mat::new(block(w, off.res_w, c * c), c, c).t(),
                &mut dz,
                T::zero(),
            );
            gemm(
                Mat::new(&cache.z, n, c).t(),
                Mat::new(dh, n, c),
                &mut g[off.res_w..off.res_w + c * c],
                T::one(),
            );
            col_sum_add(&mut g[off.res_b..off.res_b + c], dh);
        }

        let dskip: Vec<T> = (0..c)
            .map(|ch| dskip_sum[ch] * acts.skip_scale[l * c + ch])
            .collect();
        let r = lp.skip_rows[0];
        let zr = &cache.z[r * c..(r + 1) * c];
        outer_add(&mut g[off.skip_w..off.skip_w + c * c], zr, &dskip);
        col_sum_add(&mut g[off.skip_b..off.skip_b + c], &dskip);
        let back = mat_vec(block(w, off.skip_w, c * c), &dskip);
        for (d, b) in dz[r * c..(r + 1) * c].iter_mut().zip(back) {
            *d += b;
        }

        let mut dpre = vec![T::zero(); n * 2 * c];
        for (((dp, d), a), gt) in dpre
            .chunks_exact_mut(2 * c)
            .zip(dz.chunks_exact(c))
            .zip(cache.tanh.chunks_exact(c))
            .zip(cache.gate.chunks_exact(c))
        {
            let (dt, dg) = dp.split_at_mut(c);
            for ((((dt, dg), &d), &a), &gt) in dt.iter_mut().zip(dg).zip(d).zip(a).zip(gt) {
                *dt = d * gt * (T::one() - a * a);
                *dg = d * a * gt * (T::one() - gt);
            }
        }
        gemm(
            Mat::new(&cache.x, n, kc).t(),
            Mat::new(&dpre, n, 2 * c),
            &mut g[off.conv_w..off.conv_w + kc * 2 * c],
            T::one(),
        );
        col_sum_add(&mut g[off.conv_b..off.conv_b + 2 * c], &dpre);
        let mut dx = vec![T::zero(); n * kc];
        gemm(
            Mat::new(&dpre, n, 2 * c),
            Mat::new(block(w, off.conv_w, kc * 2 * c), kc, 2 * c).t(),
            &mut dx,
            T::zero(),
        );

        let mut dh = vec![T::zero(); lp.in_pos.len() * c];
        for (row, (taps, dx_row)) in lp.taps.chunks_exact(k).zip(dx.chunks_exact(kc)).enumerate() {
            for (&tap, src) in taps.iter().zip(dx_row.chunks_exact(c)) {
                if tap != NO_ROW {
                    add_into(&mut dh[tap as usize * c..][..c], src);
                }
            }
            if let Some(up) = &dh_next {
                add_into(
                    &mut dh[taps[k - 1] as usize * c..][..c],
                    &up[row * c..][..c],
                );
            }
        }
        dh_next = Some(dh);
    }

    let dh0 = dh_next.expect("at least one layer");
    outer_add(&mut g[layout.embed_w..layout.embed_w + c], &[T::one()], &{
        let mut acc = vec![T::zero(); c];
        for (row, &x) in dh0.chunks_exact(c).zip(&acts.inputs) {
            for (a, &d) in acc.iter_mut().zip(row) {
                *a += x * d;
            }
        }
        acc
    });
    col_sum_add(&mut g[layout.embed_b..layout.embed_b + c], &dh0);
    Ok(loss)
}

/// Loss and freshly allocated gradient for one labelled epoch.
pub fn loss_and_gradient<T: Real, R: Rng + ?Sized>(
    params: &Params<T>,
    samples: &[T],
    plan: &Plan,
    true_class: usize,
    rng: &mut R,
) -> Result<(f64, Params<T>)> {
    let acts = forward_train(params, samples, plan, rng)?;
    let mut grads = Params::zeros(&params.arch);
    let loss = backward(params, plan, &acts, true_class, &mut grads)?;
    Ok((loss, grads))
}
