//! Losses fused with their gradient w.r.t. the network's raw outputs.

use super::tensor::Tensor;

fn softmax_row(z: &[f32], out: &mut [f32]) {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().unwrap();
    let mut out = vec![0f32; logits.len()];
    for (z, o) in logits.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        softmax_row(z, o);
    }
    Tensor::from_vec(logits.shape(), out).unwrap()
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Pixel-wise cross-entropy over softmax logits `(…, c)`. With class weights
/// the loss is the weighted mean `sum w[y] * nll / sum w[y]`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[u8], weights: Option<&[f32]>) -> (f32, Tensor) {
    let c = *logits.shape().last().unwrap();
    assert_eq!(logits.len() / c, targets.len(), "one target per position");
    let mut grad = vec![0f32; logits.len()];
    let mut p = vec![0f32; c];
    let mut total = 0f64;
    let mut norm = 0f64;
    for ((z, g), &y) in logits.data().chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(targets) {
        softmax_row(z, &mut p);
        let w = weights.map_or(1.0, |w| w[y as usize]);
        total += -(w as f64) * (p[y as usize].max(1e-12) as f64).ln();
        norm += w as f64;
        for k in 0..c {
            g[k] = w * (p[k] - if k == y as usize { 1.0 } else { 0.0 });
        }
    }
    let norm = norm.max(1e-12);
    let inv = (1.0 / norm) as f32;
    grad.iter_mut().for_each(|g| *g *= inv);
    ((total / norm) as f32, Tensor::from_vec(logits.shape(), grad).unwrap())
}

/// Soft Dice loss averaged over classes: `1 - mean_c (2|P∩Y| + 1) / (|P| + |Y| + 1)`.
pub fn soft_dice(logits: &Tensor, targets: &[u8]) -> (f32, Tensor) {
    const SMOOTH: f64 = 1.0;
    let c = *logits.shape().last().unwrap();
    let probs = softmax(logits);
    let mut inter = vec![0f64; c];
    let mut psum = vec![0f64; c];
    let mut ysum = vec![0f64; c];
    for (p, &y) in probs.data().chunks_exact(c).zip(targets) {
        for k in 0..c {
            psum[k] += p[k] as f64;
        }
        inter[y as usize] += p[y as usize] as f64;
        ysum[y as usize] += 1.0;
    }
    let mut loss = 0.0;
    // d loss / d p_k at a pixel with label y
    let mut dp_pos = vec![0f64; c];
    let mut dp_neg = vec![0f64; c];
    for k in 0..c {
        let num = 2.0 * inter[k] + SMOOTH;
        let den = psum[k] + ysum[k] + SMOOTH;
        loss += 1.0 - num / den;
        dp_neg[k] = -(-num / (den * den)) / c as f64;
        dp_pos[k] = -(2.0 / den - num / (den * den)) / c as f64;
    }
    loss /= c as f64;
    let mut grad = vec![0f32; logits.len()];
    let mut gp = vec![0f64; c];
    for ((p, g), &y) in probs.data().chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(targets) {
        for k in 0..c {
            gp[k] = if k == y as usize { dp_pos[k] } else { dp_neg[k] };
        }
        let dot: f64 = (0..c).map(|k| gp[k] * p[k] as f64).sum();
        for k in 0..c {
            g[k] = (p[k] as f64 * (gp[k] - dot)) as f32;
        }
    }
    (loss as f32, Tensor::from_vec(logits.shape(), grad).unwrap())
}

/// Mean binary cross-entropy on logits against 0/1 targets.
pub fn bce_with_logits(logits: &Tensor, targets: &[f32]) -> (f32, Tensor) {
    assert_eq!(logits.len(), targets.len());
    let n = targets.len().max(1) as f32;
    let mut total = 0f64;
    let grad: Vec<f32> = logits
        .data()
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            // log(1 + e^z) - t z, numerically stable
            total += (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()) as f64;
            (sigmoid(z) - t) / n
        })
        .collect();
    (
        (total / n as f64) as f32,
        Tensor::from_vec(logits.shape(), grad).unwrap(),
    )
}

/// Norm floor keeping the cosine loss defined for a zero prediction.
pub const COSINE_EPS: f32 = 1e-8;

/// `1 - cos(pred, target)` for single vectors.
pub fn cosine_loss(pred: &[f32], target: &[f32]) -> f32 {
    let dot: f32 = pred.iter().zip(target).map(|(a, b)| a * b).sum();
    let np = pred.iter().map(|a| a * a).sum::<f32>().sqrt().max(COSINE_EPS);
    let nt = target.iter().map(|a| a * a).sum::<f32>().sqrt().max(COSINE_EPS);
    1.0 - dot / (np * nt)
}

/// Batch mean of [`cosine_loss`] over rows of `(n, d)` with its gradient.
pub fn cosine_loss_batch(pred: &Tensor, targets: &[f32]) -> (f32, Tensor) {
    let d = pred.shape()[1];
    let n = pred.shape()[0];
    let mut grad = vec![0f32; pred.len()];
    let mut total = 0.0;
    for ((p, t), g) in pred
        .data()
        .chunks_exact(d)
        .zip(targets.chunks_exact(d))
        .zip(grad.chunks_exact_mut(d))
    {
        total += cosine_loss(p, t);
        let dot: f32 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let np = p.iter().map(|a| a * a).sum::<f32>().sqrt().max(COSINE_EPS);
        let nt = t.iter().map(|a| a * a).sum::<f32>().sqrt().max(COSINE_EPS);
        for k in 0..d {
            let dcos = t[k] / (np * nt) - dot * p[k] / (np * np * np * nt);
            g[k] = -dcos / n as f32;
        }
    }
    (total / n as f32, Tensor::from_vec(pred.shape(), grad).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar function of a tensor.
    fn numeric_grad(t: &Tensor, f: impl Fn(&Tensor) -> f32) -> Vec<f32> {
        let h = 1e-3;
        (0..t.len())
            .map(|i| {
                let mut a = t.clone();
                a.data_mut()[i] += h;
                let mut b = t.clone();
                b.data_mut()[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn logits() -> Tensor {
        let data: Vec<f32> = (0..24).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.3).collect();
        Tensor::from_vec(&[1, 2, 4, 3], data).unwrap()
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let z = logits();
        let y = [0u8, 1, 2, 1, 0, 0, 2, 1];
        let w = [0.5f32, 1.0, 2.0];
        let (_, g) = softmax_cross_entropy(&z, &y, Some(&w));
        let num = numeric_grad(&z, |t| softmax_cross_entropy(t, &y, Some(&w)).0);
        assert_close(g.data(), &num, 2e-2);
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let z = logits();
        let y = [0u8, 1, 2, 1, 0, 0, 2, 1];
        let (_, g) = soft_dice(&z, &y);
        let num = numeric_grad(&z, |t| soft_dice(t, &y).0);
        assert_close(g.data(), &num, 2e-2);
    }

    #[test]
    fn bce_and_cosine_gradients() {
        let z = Tensor::from_vec(&[3, 1], vec![0.3, -1.2, 2.0]).unwrap();
        let t = [1.0, 0.0, 0.0];
        let (l, g) = bce_with_logits(&z, &t);
        assert!(l >= 0.0);
        assert_close(g.data(), &numeric_grad(&z, |x| bce_with_logits(x, &t).0), 2e-2);

        let p = Tensor::from_vec(&[2, 2], vec![0.4, 1.3, -0.7, 0.2]).unwrap();
        let t = [0.0, 1.0, 1.0, 0.0];
        let (_, g) = cosine_loss_batch(&p, &t);
        assert_close(g.data(), &numeric_grad(&p, |x| cosine_loss_batch(x, &t).0), 2e-2);
    }

    #[test]
    fn cosine_loss_reference_values() {
        assert_eq!(cosine_loss(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_loss(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-7);
        let expected = 1.0 - 1.0 / 2f32.sqrt();
        assert!((cosine_loss(&[1.0, 1.0], &[0.0, 1.0]) - expected).abs() < 1e-6);
        // zero prediction stays finite
        assert!(cosine_loss(&[0.0, 0.0], &[0.0, 1.0]).is_finite());
    }
}
