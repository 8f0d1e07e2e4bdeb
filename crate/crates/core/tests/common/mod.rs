//! Oracles shared by the integration test targets.

use mpsynth::Tensor;

/// Window-by-window SSIM with an explicit 2-D Gaussian.
pub fn ssim_loop_oracle(x: &Tensor<f32>, y: &Tensor<f32>) -> f64 {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let sigma = 1.5f64;
    let mut k2 = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for u in 0..11 {
        for v in 0..11 {
            let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
            k2[u][v] = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
            total += k2[u][v];
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let px = |i: usize, j: usize| x.data()[i * w + j] as f64;
    let py = |i: usize, j: usize| y.data()[i * w + j] as f64;
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..=h - 11 {
        for j in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let k = k2[u][v] / total;
                    mx += k * px(i + u, j + v);
                    my += k * py(i + u, j + v);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let k = k2[u][v] / total;
                    let (a, b) = (px(i + u, j + v) - mx, py(i + u, j + v) - my);
                    vx += k * a * a;
                    vy += k * b * b;
                    cov += k * a * b;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
