//! Synthetic stand-in for reanalysis and gridded precipitation data.
//!
//! Background anomalies are spatially smoothed Gaussian noise. On a fixed
//! share of "extreme" days a trough/ridge dipole of amplitude
//! `signal_strength` (in units of the background standard deviation) is
//! added to both pressure-like fields at a random position, and heavy rain
//! is added over the precipitation region.

use std::f64::consts::PI;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use super::{calendar_day, DailyGridSeries};
use crate::{Error, Result};

/// Latitude band of the precipitation region, degrees north.
pub const MIDWEST_LAT: (f64, f64) = (37.0, 48.0);
/// Longitude band of the precipitation region, degrees east.
pub const MIDWEST_LON: (f64, f64) = (-104.0, -86.0);
/// Share of days that receive a planted extreme event.
pub const PLANTED_FRACTION: f64 = 0.05;

pub const MIN_DAYS: usize = 40;

const DIPOLE_RADIUS: f64 = 2.5;
/// Ridge sits this many grid columns east of the trough.
const DIPOLE_SEPARATION: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub slp: DailyGridSeries,
    pub gph: DailyGridSeries,
    pub precip: DailyGridSeries,
    /// Planted extreme-day flags.
    pub truth: Vec<u8>,
}

fn axis(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| start + step * i as f64).collect()
}

/// Two passes of a 3x3 box blur with edge renormalisation, rescaled so
/// interior cells keep unit variance.
fn smoothed_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut field: Vec<f64> = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for _ in 0..2 {
        let mut next = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        s += field[ii * w + jj];
                        n += 1.0;
                    }
                }
                next[i * w + j] = s / n;
            }
        }
        field = next;
    }
    // interior weights of the composite 5x5 kernel are (a_i a_j) / 81 with a = [1,2,3,2,1]
    let sum_sq: f64 = [1.0f64, 2.0, 3.0, 2.0, 1.0].iter().map(|a| a * a).sum::<f64>().powi(2) / 81.0 / 81.0;
    let scale = 1.0 / sum_sq.sqrt();
    field.iter_mut().for_each(|v| *v *= scale);
    field
}

fn dipole(h: usize, w: usize, trough: (usize, usize), amplitude: f64) -> Vec<f64> {
    let ridge = (trough.0, trough.1 + DIPOLE_SEPARATION);
    let blob = |c: (usize, usize), i: usize, j: usize| {
        let d2 = (i as f64 - c.0 as f64).powi(2) + (j as f64 - c.1 as f64).powi(2);
        (-d2 / (2.0 * DIPOLE_RADIUS * DIPOLE_RADIUS)).exp()
    };
    (0..h * w)
        .map(|idx| {
            let (i, j) = (idx / w, idx % w);
            amplitude * (blob(ridge, i, j) - blob(trough, i, j))
        })
        .collect()
}

/// Deterministic synthetic data set of `n_days` consecutive days from
/// 1981-01-01 on a 15x35, 2.5-degree grid (20N-55N, 140W-55W).
pub fn synth_generate(seed: u64, n_days: usize, signal_strength: f64) -> Result<SynthData> {
    if n_days < MIN_DAYS {
        return Err(Error::Input(format!("synthetic series needs at least {MIN_DAYS} days, got {n_days}")));
    }
    if !signal_strength.is_finite() || signal_strength < 0.0 {
        return Err(Error::Input(format!("signal strength {signal_strength} must be finite and non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(1981, 1, 1).expect("valid date");
    let dates: Vec<NaiveDate> = start.iter_days().take(n_days).collect();
    let (h, w) = (15, 35);
    let lats = axis(20.0, 2.5, h);
    let lons = axis(-140.0, 2.5, w);

    let planted = (n_days as f64 * PLANTED_FRACTION).round() as usize;
    let mut order: Vec<usize> = (0..n_days).collect();
    order.shuffle(&mut rng);
    let mut truth = vec![0u8; n_days];
    for &i in &order[..planted] {
        truth[i] = 1;
    }

    let (plat, plon) = (axis(35.0, 1.0, 16), axis(-106.0, 1.0, 23));
    let rain_background = Exp::new(0.5).expect("rate");
    let rain_extra = Exp::new(0.2).expect("rate");

    let mut slp = Vec::with_capacity(n_days * h * w);
    let mut gph = Vec::with_capacity(n_days * h * w);
    let mut rain = Vec::with_capacity(n_days * plat.len() * plon.len());
    for (d, &date) in dates.iter().enumerate() {
        let season = (2.0 * PI * (calendar_day(date) as f64 - 15.0) / 365.0).cos();
        let mut a_slp = smoothed_noise(&mut rng, h, w);
        let mut a_gph = smoothed_noise(&mut rng, h, w);
        if truth[d] == 1 {
            let trough = (rng.gen_range(3..=11), rng.gen_range(6..=w - 1 - DIPOLE_SEPARATION - 6));
            let pattern = dipole(h, w, trough, signal_strength);
            for ((s, g), p) in a_slp.iter_mut().zip(a_gph.iter_mut()).zip(&pattern) {
                *s += p;
                *g += p;
            }
        }
        for i in 0..h {
            let lat_frac = (lats[i] - 20.0) / 35.0;
            let slp_sd = 6.0 + 2.0 * season + 4.0 * lat_frac;
            let gph_sd = 60.0 + 20.0 * season + 40.0 * lat_frac;
            for j in 0..w {
                let k = i * w + j;
                slp.push(1013.0 + 3.0 * season * lat_frac + slp_sd * a_slp[k]);
                gph.push(5850.0 - 250.0 * lat_frac - 60.0 * season + gph_sd * a_gph[k]);
            }
        }
        let mut regional = rain_background.sample(&mut rng);
        if truth[d] == 1 {
            regional += 25.0 + rain_extra.sample(&mut rng);
        }
        for _ in 0..plat.len() * plon.len() {
            let jitter: f64 = rng.sample(StandardNormal);
            rain.push((regional * (1.0 + 0.2 * jitter)).max(0.0));
        }
    }

    Ok(SynthData {
        slp: DailyGridSeries::new("slp", dates.clone(), lats.clone(), lons.clone(), slp)?,
        gph: DailyGridSeries::new("gph", dates.clone(), lats, lons, gph)?,
        precip: DailyGridSeries::new("precip", dates, plat, plon, rain)?,
        truth,
    })
}
