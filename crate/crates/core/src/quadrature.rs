//! Composite trapezoid rules and a running fourth-order integral.

/// Composite trapezoid rule for `∫_a^b f` with `panels` equal panels.
/// On a non-finite sample the offending abscissa is returned as the error.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> Result<f64, f64> {
    let n = panels.max(1);
    let h = (b - a) / n as f64;
    let mut sum = 0.0;
    for i in 0..=n {
        let x = if i == n { b } else { a + h * i as f64 };
        let fx = f(x);
        if !fx.is_finite() {
            return Err(x);
        }
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        sum += w * fx;
    }
    Ok(sum * h)
}

/// Equally spaced nodes `a = x_0 < … < x_n = b`.
pub fn nodes(a: f64, b: f64, panels: usize) -> Vec<f64> {
    let n = panels.max(1);
    let h = (b - a) / n as f64;
    (0..=n)
        .map(|i| if i == n { b } else { a + h * i as f64 })
        .collect()
}

/// Running integral of samples `ys` over equally spaced nodes `xs`; starts at 0.
///
/// Each panel integrates the cubic through the four nearest samples, so the
/// running values are fourth-order accurate. Fewer than four nodes fall back to
/// the trapezoid rule.
pub fn cumulative(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut out = Vec::with_capacity(n);
    out.push(0.0);
    if n < 4 {
        let mut acc = 0.0;
        for i in 1..n {
            acc += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
            out.push(acc);
        }
        return out;
    }
    let mut acc = 0.0;
    for i in 0..n - 1 {
        let h = xs[i + 1] - xs[i];
        let panel = if i == 0 {
            9.0 * ys[0] + 19.0 * ys[1] - 5.0 * ys[2] + ys[3]
        } else if i == n - 2 {
            9.0 * ys[i + 1] + 19.0 * ys[i] - 5.0 * ys[i - 1] + ys[i - 2]
        } else {
            13.0 * (ys[i] + ys[i + 1]) - ys[i - 1] - ys[i + 2]
        };
        acc += panel * h / 24.0;
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_linear() {
        let v = trapezoid(|x| 3.0 * x + 1.0, 0.0, 2.0, 3).unwrap();
        assert!((v - 8.0).abs() < 1e-14);
    }

    #[test]
    fn second_order_convergence() {
        let e1 = (trapezoid(f64::exp, 0.0, 1.0, 64).unwrap() - (1f64.exp() - 1.0)).abs();
        let e2 = (trapezoid(f64::exp, 0.0, 1.0, 128).unwrap() - (1f64.exp() - 1.0)).abs();
        assert!((e1 / e2 - 4.0).abs() < 0.01);
    }

    #[test]
    fn reports_singularity() {
        assert_eq!(trapezoid(|x| 1.0 / x, 0.0, 1.0, 4), Err(0.0));
    }

    #[test]
    fn cumulative_exact_on_cubics() {
        let xs = nodes(0.0, 1.0, 10);
        let ys: Vec<f64> = xs.iter().map(|x| x * x * x - 2.0 * x).collect();
        let c = cumulative(&xs, &ys);
        for (x, v) in xs.iter().zip(&c) {
            assert!((v - (x.powi(4) / 4.0 - x * x)).abs() < 1e-14);
        }
    }

    #[test]
    fn cumulative_fourth_order() {
        let err = |n: usize| {
            let xs = nodes(0.0, 1.0, n);
            let ys: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
            let c = cumulative(&xs, &ys);
            xs.iter().zip(&c).map(|(x, v)| (v - (x.exp() - 1.0)).abs()).fold(0.0, f64::max)
        };
        let ratio = err(32) / err(64);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn cumulative_short_falls_back() {
        let c = cumulative(&[0.0, 1.0, 3.0], &[1.0, 1.0, 2.0]);
        assert_eq!(c, vec![0.0, 1.0, 4.0]);
    }
}
