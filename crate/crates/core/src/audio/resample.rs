//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc lowpass.

use std::f64::consts::PI;

/// Number of zero crossings of the prototype sinc on each side, per unit of
/// `max(up, down)`.
const HALF_TAPS_PER_RATIO: usize = 10;
const KAISER_BETA: f64 = 5.0;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Lowpass prototype at the upsampled rate, centered at index `half`.
fn design_filter(up: usize, down: usize) -> (Vec<f64>, usize) {
    let ratio = up.max(down);
    let half = HALF_TAPS_PER_RATIO * ratio;
    let cutoff = 0.5 / ratio as f64;
    let denom = bessel_i0(KAISER_BETA);
    let taps = (0..=2 * half)
        .map(|i| {
            let n = i as f64 - half as f64;
            let arg = 2.0 * cutoff * n;
            let sinc = if n == 0.0 {
                1.0
            } else {
                (PI * arg).sin() / (PI * arg)
            };
            let r = n / half as f64;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / denom;
            2.0 * cutoff * sinc * window
        })
        .collect::<Vec<_>>();
    // unity passband gain after zero-stuffing by `up`
    let sum: f64 = taps.iter().sum();
    let taps = taps.into_iter().map(|t| t * up as f64 / sum).collect();
    (taps, half)
}

/// Octave `resample` filter design: 60 dB Kaiser-windowed sinc with a
/// transition band a tenth of the cutoff, normalized to unit DC gain.
fn octave_filter(up: usize, down: usize) -> (Vec<f64>, usize) {
    let cutoff = 1.0 / (2.0 * up.max(down) as f64);
    let roll_off = cutoff / 10.0;
    let rejection_db = 60.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as usize;
    let beta = 0.1102 * (rejection_db - 8.7);
    let denom = bessel_i0(beta);
    let taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let n = i as f64 - half as f64;
            let arg = 2.0 * cutoff * n;
            let sinc = if n == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            let r = n / half as f64;
            let window = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom;
            2.0 * up as f64 * cutoff * sinc * window
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    (taps.into_iter().map(|t| t * up as f64 / sum).collect(), half)
}

fn reduce(up: usize, down: usize) -> (usize, usize) {
    assert!(up > 0 && down > 0, "resampling factors must be positive");
    let g = gcd(up, down);
    (up / g, down / g)
}

/// Resamples by `up / down`. Output length is `ceil(len * up / down)`.
pub fn resample_rational(input: &[f64], up: usize, down: usize) -> Vec<f64> {
    let (up, down) = reduce(up, down);
    if up == 1 && down == 1 {
        return input.to_vec();
    }
    let (taps, half) = design_filter(up, down);
    polyphase(input, up, down, &taps, half)
}

/// Resamples by `up / down` with the filter Octave's `resample` designs,
/// aligned like `scipy.signal.resample_poly`.
pub fn resample_octave(input: &[f64], up: usize, down: usize) -> Vec<f64> {
    let (up, down) = reduce(up, down);
    if up == 1 && down == 1 {
        return input.to_vec();
    }
    let (taps, half) = octave_filter(up, down);
    polyphase(input, up, down, &taps, half)
}

fn polyphase(input: &[f64], up: usize, down: usize, taps: &[f64], half: usize) -> Vec<f64> {
    let out_len = (input.len() * up).div_ceil(down);
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        // position on the zero-stuffed grid; the filter center aligns with it
        let t = (m * down) as isize;
        let lo = (t - half as isize).max(0);
        let hi = t + half as isize;
        // first input index k with k*up >= lo
        let k_start = (lo as usize).div_ceil(up);
        let mut acc = 0.0;
        let mut k = k_start;
        while (k * up) as isize <= hi && k < input.len() {
            let tap = (k * up) as isize - t + half as isize;
            acc += input[k] * taps[tap as usize];
            k += 1;
        }
        out.push(acc);
    }
    out
}
