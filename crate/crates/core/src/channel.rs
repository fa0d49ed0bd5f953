//! Line-of-sight downlink channels from the RSU panel to a single-antenna
//! user, achievable rate and exhaustive beam search.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::codebook::{steering_vector, ArrayGeometry, BeamCodebook, BeamIndex};
use crate::error::{Error, Result};

/// RSU placement and link budget.
///
/// The array frame has its x axis along boresight, its y axis along the
/// horizontal element axis (to the left of boresight) and its z axis along
/// the vertical element axis. `boresight_azimuth` rotates boresight about
/// the world z axis; `downtilt` tips it below the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub rsu_position: [f64; 3],
    pub boresight_azimuth: f64,
    #[serde(default)]
    pub downtilt: f64,
    /// Transmit SNR (transmit power over noise power), linear.
    pub snr_linear: f64,
    pub carrier_wavelength: f64,
    pub blockage_attenuation_db: f64,
    /// Fixed phase offset applied to the second polarization, radians.
    #[serde(default)]
    pub polarization_phase: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            rsu_position: [0.0, 0.0, 0.0],
            boresight_azimuth: 0.0,
            downtilt: 0.0,
            snr_linear: 1e10,
            // 28 GHz
            carrier_wavelength: 299_792_458.0 / 28e9,
            blockage_attenuation_db: 20.0,
            polarization_phase: 0.0,
        }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_linear > 0.0 && self.snr_linear.is_finite()) {
            return Err(Error::invalid(format!("snr must be positive, got {}", self.snr_linear)));
        }
        if !(self.carrier_wavelength > 0.0 && self.carrier_wavelength.is_finite()) {
            return Err(Error::invalid(format!(
                "wavelength must be positive, got {}",
                self.carrier_wavelength
            )));
        }
        if !(self.blockage_attenuation_db >= 0.0) {
            return Err(Error::invalid(format!(
                "blockage attenuation must be >= 0 dB, got {}",
                self.blockage_attenuation_db
            )));
        }
        if self.rsu_position.iter().any(|v| !v.is_finite())
            || !self.boresight_azimuth.is_finite()
            || !self.downtilt.is_finite()
            || !self.polarization_phase.is_finite()
        {
            return Err(Error::invalid("RSU pose must be finite"));
        }
        Ok(())
    }

    /// Unit vectors of the array frame (boresight, horizontal axis, vertical
    /// axis) expressed in world coordinates.
    pub fn array_axes(&self) -> [[f64; 3]; 3] {
        let (sy, cy) = self.boresight_azimuth.sin_cos();
        let (st, ct) = self.downtilt.sin_cos();
        [[ct * cy, ct * sy, -st], [-sy, cy, 0.0], [st * cy, st * sy, ct]]
    }

    /// Direction of `user` in the array frame as `(azimuth, zenith, distance)`.
    pub fn user_angles(&self, user: [f64; 3]) -> Result<(f64, f64, f64)> {
        let d = [
            user[0] - self.rsu_position[0],
            user[1] - self.rsu_position[1],
            user[2] - self.rsu_position[2],
        ];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::invalid(format!(
                "user at {user:?} is co-located with the RSU or not finite"
            )));
        }
        let [bx, hy, vz] = self.array_axes();
        let dot = |a: [f64; 3]| a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
        let (x, y, z) = (dot(bx), dot(hy), dot(vz));
        let zenith = (z / r).clamp(-1.0, 1.0).acos();
        let azimuth = y.atan2(x);
        Ok((azimuth, zenith, r))
    }
}

/// Downlink channel vector from every RSU port to the user antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<Complex64>,
    pub user_position: [f64; 3],
    pub blocked: bool,
}

impl ChannelRealization {
    pub fn norm(&self) -> f64 {
        self.h.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Same realization with the channel scaled by `alpha`.
    pub fn scaled(&self, alpha: Complex64) -> Self {
        Self {
            h: self.h.iter().map(|c| c * alpha).collect(),
            ..self.clone()
        }
    }
}

/// Free-space LoS channel with optional blockage attenuation.
pub fn synthesize_los_channel(
    user_position: [f64; 3],
    params: &LinkParams,
    geometry: &ArrayGeometry,
    blocked: bool,
) -> Result<ChannelRealization> {
    params.validate()?;
    let (azimuth, zenith, distance) = params.user_angles(user_position)?;
    let single = geometry.single_pol();
    let scale = (single.elements() as f64).sqrt();
    let a: Vec<Complex64> = steering_vector(&single, azimuth, zenith)?
        .into_iter()
        .map(|c| c * scale)
        .collect();

    let lambda = params.carrier_wavelength;
    let mut amplitude = lambda / (4.0 * PI * distance);
    if blocked {
        amplitude *= 10f64.powf(-params.blockage_attenuation_db / 20.0);
    }
    let gain = Complex64::from_polar(amplitude, -2.0 * PI * distance / lambda);

    let mut h: Vec<Complex64> = a.iter().map(|x| gain * x).collect();
    if geometry.dual_polarized {
        let psi = Complex64::from_polar(1.0, params.polarization_phase);
        h.extend(a.iter().map(|x| gain * psi * x));
    }
    Ok(ChannelRealization {
        h,
        user_position,
        blocked,
    })
}

/// `|h^H w|^2`.
pub fn beam_gain(h: &[Complex64], w: &[Complex64]) -> f64 {
    h.iter().zip(w).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm_sqr()
}

/// `log2(1 + snr * |h^H w|^2)` in bits/s/Hz.
pub fn achievable_rate(h: &ChannelRealization, precoder: &[Complex64], snr_linear: f64) -> Result<f64> {
    if h.h.len() != precoder.len() {
        return Err(Error::invalid(format!(
            "channel has {} ports but precoder has {}",
            h.h.len(),
            precoder.len()
        )));
    }
    if !(snr_linear > 0.0) {
        return Err(Error::invalid(format!("snr must be positive, got {snr_linear}")));
    }
    Ok((1.0 + snr_linear * beam_gain(&h.h, precoder)).log2())
}

/// Beamforming gain of every codeword, in flat-index order.
pub fn codebook_gains(h: &ChannelRealization, codebook: &BeamCodebook) -> Result<Vec<f64>> {
    if h.h.len() != codebook.ports() {
        return Err(Error::invalid(format!(
            "channel has {} ports but codebook has {}",
            h.h.len(),
            codebook.ports()
        )));
    }
    Ok(codebook.precoders().map(|w| beam_gain(&h.h, w)).collect())
}

/// Exhaustive-search beam: argmax gain, lowest flat index on ties.
pub fn oracle_beam(h: &ChannelRealization, codebook: &BeamCodebook) -> Result<BeamIndex> {
    if codebook.is_empty() {
        return Err(Error::invalid("empty codebook"));
    }
    let gains = codebook_gains(h, codebook)?;
    let mut best = 0;
    for (i, &g) in gains.iter().enumerate().skip(1) {
        if g > gains[best] {
            best = i;
        }
    }
    BeamIndex::from_flat(best, &codebook.params())
}

/// The `k` best beams by descending gain, ties by ascending flat index.
pub fn top_k_beams(h: &ChannelRealization, codebook: &BeamCodebook, k: usize) -> Result<Vec<BeamIndex>> {
    if k == 0 || k > codebook.len() {
        return Err(Error::invalid(format!("k must be in [1, {}], got {k}", codebook.len())));
    }
    let gains = codebook_gains(h, codebook)?;
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]).then(a.cmp(&b)));
    let params = codebook.params();
    order
        .into_iter()
        .take(k)
        .map(|i| BeamIndex::from_flat(i, &params))
        .collect()
}
