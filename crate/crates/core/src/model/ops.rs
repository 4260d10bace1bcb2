//! Elementwise pieces shared by inference and training, so both paths compute identical
//! activations.

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Layer normalization of one row. Returns `(normalized, xhat, rstd)`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    let y = xhat
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((&h, &g), &b)| h * g + b)
        .collect();
    (y, xhat, rstd)
}

/// Gradient of layer normalization with respect to its input row.
pub fn layer_norm_backward(dy: &[f64], xhat: &[f64], rstd: f64, gain: &[f64]) -> Vec<f64> {
    let n = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(d, h)| rstd * (d - mean_d - h * mean_dx))
        .collect()
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = [0.3, -1.2, 2.0, 0.1];
        let g = [1.0, 0.5, -2.0, 1.5];
        let b = [0.0, 0.1, 0.2, 0.3];
        let dy = [0.7, -0.1, 0.4, 1.0];
        let (_, xhat, rstd) = layer_norm(&x, &g, &b);
        let analytic = layer_norm_backward(&dy, &xhat, rstd, &g);
        let objective = |x: &[f64]| -> f64 {
            let (y, _, _) = layer_norm(x, &g, &b);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        for i in 0..4 {
            let h = 1e-6;
            let mut up = x;
            up[i] += h;
            let mut down = x;
            down[i] -= h;
            let fd = (objective(&up) - objective(&down)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7);
        }
    }
}
