//! Sliding-window SSIM and direct PSNR written as plain loops.

/// Mean SSIM over all pixels and channels, 'same' zero padding, Gaussian
/// window of odd size `win` and std `sigma`. Images are `H x W x C` row-major.
#[allow(clippy::too_many_arguments)]
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, c: usize, win: usize, sigma: f64, c1: f64, c2: f64) -> f64 {
    let r = (win / 2) as isize;
    let mut kern = vec![0.0; win];
    for (i, k) in kern.iter_mut().enumerate() {
        let d = i as f64 - r as f64;
        *k = (-(d * d) / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|k| *k /= s);
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let wt = kern[(dy + r) as usize] * kern[(dx + r) as usize];
                        let i = ((yy as usize) * w + xx as usize) * c + ch;
                        mx += wt * a[i];
                        my += wt * b[i];
                        mxx += wt * a[i] * a[i];
                        myy += wt * b[i] * b[i];
                        mxy += wt * a[i] * b[i];
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cxy = mxy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (h * w * c) as f64
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}
