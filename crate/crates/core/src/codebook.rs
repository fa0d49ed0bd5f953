//! UPA steering vectors and the single-panel rank-1 Type-I codebook.
//!
//! Element `(a, b)` of the panel sits at horizontal index `a` and vertical
//! index `b`; vectors are laid out row-major with `a` outer and `b` inner.
//! Angles follow the array frame: zenith is measured from the vertical array
//! axis and azimuth from boresight, so broadside is `zenith = pi/2,
//! azimuth = 0`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of QPSK co-phasing hypotheses between the two polarizations.
pub const CO_PHASES: usize = 4;

/// Antenna panel description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n1: usize,
    pub n2: usize,
    pub dual_polarized: bool,
    /// Horizontal element spacing in wavelengths.
    pub spacing_h: f64,
    /// Vertical element spacing in wavelengths.
    pub spacing_v: f64,
}

impl Default for ArrayGeometry {
    /// The 8x2 dual-polarized half-wavelength panel.
    fn default() -> Self {
        Self {
            n1: 8,
            n2: 2,
            dual_polarized: true,
            spacing_h: 0.5,
            spacing_v: 0.5,
        }
    }
}

impl ArrayGeometry {
    pub fn new(n1: usize, n2: usize, dual_polarized: bool, spacing_h: f64, spacing_v: f64) -> Result<Self> {
        let g = Self {
            n1,
            n2,
            dual_polarized,
            spacing_h,
            spacing_v,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::invalid(format!(
                "array dimensions must be positive, got {}x{}",
                self.n1, self.n2
            )));
        }
        if !(self.spacing_h > 0.0 && self.spacing_h.is_finite())
            || !(self.spacing_v > 0.0 && self.spacing_v.is_finite())
        {
            return Err(Error::invalid(format!(
                "element spacing must be positive, got ({}, {})",
                self.spacing_h, self.spacing_v
            )));
        }
        Ok(())
    }

    /// Elements per polarization.
    pub fn elements(&self) -> usize {
        self.n1 * self.n2
    }

    /// Total antenna ports.
    pub fn ports(&self) -> usize {
        if self.dual_polarized {
            2 * self.elements()
        } else {
            self.elements()
        }
    }

    /// The same panel with a single polarization.
    pub fn single_pol(&self) -> Self {
        Self {
            dual_polarized: false,
            ..*self
        }
    }
}

/// Codebook dimensioning: panel size plus oversampling factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookParams {
    pub n1: usize,
    pub n2: usize,
    pub o1: usize,
    pub o2: usize,
}

impl Default for CodebookParams {
    fn default() -> Self {
        Self {
            n1: 8,
            n2: 2,
            o1: 4,
            o2: 4,
        }
    }
}

impl CodebookParams {
    pub fn horizontal_beams(&self) -> usize {
        self.n1 * self.o1
    }

    pub fn vertical_beams(&self) -> usize {
        self.n2 * self.o2
    }

    /// Number of precoders, `n1*o1 * n2*o2 * 4`.
    pub fn size(&self) -> usize {
        self.horizontal_beams() * self.vertical_beams() * CO_PHASES
    }
}

/// Structured beam index `(l, m, p)` with its row-major flattening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BeamIndex {
    pub l: usize,
    pub m: usize,
    pub p: usize,
    pub flat: usize,
}

impl BeamIndex {
    pub fn new(l: usize, m: usize, p: usize, params: &CodebookParams) -> Result<Self> {
        if l >= params.horizontal_beams() || m >= params.vertical_beams() || p >= CO_PHASES {
            return Err(Error::OutOfBounds(format!(
                "beam index ({l}, {m}, {p}) outside ({}, {}, {CO_PHASES})",
                params.horizontal_beams(),
                params.vertical_beams()
            )));
        }
        let flat = (l * params.vertical_beams() + m) * CO_PHASES + p;
        Ok(Self { l, m, p, flat })
    }

    pub fn from_flat(flat: usize, params: &CodebookParams) -> Result<Self> {
        if flat >= params.size() {
            return Err(Error::OutOfBounds(format!(
                "flat beam index {flat} outside [0, {})",
                params.size()
            )));
        }
        let p = flat % CO_PHASES;
        let lm = flat / CO_PHASES;
        Ok(Self {
            l: lm / params.vertical_beams(),
            m: lm % params.vertical_beams(),
            p,
            flat,
        })
    }
}

/// UPA array response for a single polarization, normalized to unit norm.
pub fn steering_vector(geometry: &ArrayGeometry, azimuth: f64, zenith: f64) -> Result<Vec<Complex64>> {
    if !azimuth.is_finite() || !zenith.is_finite() {
        return Err(Error::invalid(format!(
            "steering angles must be finite, got azimuth={azimuth}, zenith={zenith}"
        )));
    }
    geometry.validate()?;
    let u = geometry.spacing_h * zenith.sin() * azimuth.sin();
    let v = geometry.spacing_v * zenith.cos();
    let scale = 1.0 / (geometry.elements() as f64).sqrt();
    let mut out = Vec::with_capacity(geometry.elements());
    for a in 0..geometry.n1 {
        for b in 0..geometry.n2 {
            let phase = 2.0 * PI * (a as f64 * u + b as f64 * v);
            out.push(Complex64::from_polar(scale, phase));
        }
    }
    Ok(out)
}

/// Length-`n` DFT vector oversampled by `o`, unnormalized.
fn dft_vector(n: usize, o: usize, k: usize) -> Vec<Complex64> {
    (0..n)
        .map(|a| Complex64::from_polar(1.0, 2.0 * PI * (a * k) as f64 / (n * o) as f64))
        .collect()
}

/// Co-phasing factor `exp(j*pi*p/2)`, exact on the unit circle.
pub fn co_phase(p: usize) -> Complex64 {
    match p % CO_PHASES {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// Ordered set of unit-norm precoders indexed by [`BeamIndex::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct BeamCodebook {
    pub geometry: ArrayGeometry,
    pub o1: usize,
    pub o2: usize,
    ports: usize,
    data: Vec<Complex64>,
}

impl BeamCodebook {
    pub fn params(&self) -> CodebookParams {
        CodebookParams {
            n1: self.geometry.n1,
            n2: self.geometry.n2,
            o1: self.o1,
            o2: self.o2,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.ports
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ports(&self) -> usize {
        self.ports
    }

    pub fn precoder(&self, flat: usize) -> &[Complex64] {
        &self.data[flat * self.ports..(flat + 1) * self.ports]
    }

    pub fn precoders(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks_exact(self.ports)
    }

    /// Writes the binary export: magic `BVCB`, then `n1 n2 o1 o2 ports count`
    /// as little-endian u32, then every precoder as interleaved
    /// little-endian f64 real/imaginary pairs in flat-index order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"BVCB")?;
        for v in [
            self.geometry.n1,
            self.geometry.n2,
            self.o1,
            self.o2,
            self.ports,
            self.len(),
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for c in &self.data {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a binary export back as `(params, precoders)`.
    pub fn read_binary<R: Read>(mut r: R) -> std::io::Result<(CodebookParams, Vec<Vec<Complex64>>)> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"BVCB" {
            return Err(bad("not a codebook export"));
        }
        let mut header = [0usize; 6];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b) as usize;
        }
        let [n1, n2, o1, o2, ports, count] = header;
        let mut precoders = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            let mut w = Vec::with_capacity(ports);
            for _ in 0..ports {
                r.read_exact(&mut b)?;
                let re = f64::from_le_bytes(b);
                r.read_exact(&mut b)?;
                w.push(Complex64::new(re, f64::from_le_bytes(b)));
            }
            precoders.push(w);
        }
        Ok((CodebookParams { n1, n2, o1, o2 }, precoders))
    }
}

/// Builds the rank-1 single-panel Type-I codebook.
///
/// Precoder `(l, m, p)` is `[b; phi_p * b] / sqrt(2)` where
/// `b = kron(d(l), d(m)) / sqrt(n1*n2)` and `phi_p = exp(j*pi*p/2)`.
pub fn build_type1_codebook(geometry: &ArrayGeometry, o1: usize, o2: usize) -> Result<BeamCodebook> {
    geometry.validate()?;
    if !geometry.dual_polarized {
        return Err(Error::Unsupported(
            "Type-I codebook requires a dual-polarized panel".into(),
        ));
    }
    if o1 == 0 || o2 == 0 {
        return Err(Error::invalid(format!(
            "oversampling factors must be >= 1, got ({o1}, {o2})"
        )));
    }
    let params = CodebookParams {
        n1: geometry.n1,
        n2: geometry.n2,
        o1,
        o2,
    };
    let ports = geometry.ports();
    let norm = 1.0 / (geometry.elements() as f64).sqrt();
    let mut data = Vec::with_capacity(params.size() * ports);
    for l in 0..params.horizontal_beams() {
        let dh = dft_vector(geometry.n1, o1, l);
        for m in 0..params.vertical_beams() {
            let dv = dft_vector(geometry.n2, o2, m);
            let beam: Vec<Complex64> = dh.iter().flat_map(|x| dv.iter().map(move |y| x * y * norm)).collect();
            for p in 0..CO_PHASES {
                let phi = co_phase(p);
                data.extend(beam.iter().map(|x| x * FRAC_1_SQRT_2));
                data.extend(beam.iter().map(|x| x * phi * FRAC_1_SQRT_2));
            }
        }
    }
    Ok(BeamCodebook {
        geometry: *geometry,
        o1,
        o2,
        ports,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[Complex64]) -> f64 {
        v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn broadside_is_flat() {
        let g = ArrayGeometry::new(4, 1, false, 0.5, 0.5).unwrap();
        let s = steering_vector(&g, 0.0, PI / 2.0).unwrap();
        for c in &s {
            assert!((c - Complex64::new(0.5, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn endfire_alternates_sign() {
        let g = ArrayGeometry::new(4, 1, false, 0.5, 0.5).unwrap();
        let s = steering_vector(&g, PI / 2.0, PI / 2.0).unwrap();
        for (a, c) in s.iter().enumerate() {
            let expected = if a % 2 == 0 { 0.5 } else { -0.5 };
            assert!((c - Complex64::new(expected, 0.0)).norm() < 1e-12, "{a}: {c}");
        }
    }

    #[test]
    fn steering_matches_scalar_loop() {
        let g = ArrayGeometry::new(2, 2, false, 0.5, 0.5).unwrap();
        let (az, ze) = (PI / 6.0, PI / 3.0);
        let s = steering_vector(&g, az, ze).unwrap();
        // direct per-element evaluation, indices written out by hand
        let elems = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
        for (i, (a, b)) in elems.iter().enumerate() {
            let arg = 2.0 * PI * (a * 0.5 * ze.sin() * az.sin() + b * 0.5 * ze.cos());
            let re = arg.cos() / 2.0;
            let im = arg.sin() / 2.0;
            assert!((s[i].re - re).abs() < 1e-12 && (s[i].im - im).abs() < 1e-12);
        }
        assert!((norm(&s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_angle_rejected() {
        let g = ArrayGeometry::default().single_pol();
        assert!(matches!(
            steering_vector(&g, f64::NAN, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(steering_vector(&g, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn default_codebook_shape() {
        let cb = build_type1_codebook(&ArrayGeometry::default(), 4, 4).unwrap();
        assert_eq!(cb.len(), 1024);
        assert_eq!(cb.ports(), 32);
        let m = 1.0 / 32f64.sqrt();
        for w in cb.precoders() {
            assert!((norm(w) - 1.0).abs() < 1e-9);
            for c in w {
                assert!((c.norm() - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn smallest_case_hand_expanded() {
        let g = ArrayGeometry::new(2, 1, true, 0.5, 0.5).unwrap();
        let cb = build_type1_codebook(&g, 1, 1).unwrap();
        let w = cb.precoder(BeamIndex::new(0, 0, 0, &cb.params()).unwrap().flat);
        for c in w {
            assert!((c - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        }
        // p = 1 puts j on the second polarization
        let w = cb.precoder(1);
        assert!((w[2] - Complex64::new(0.0, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn single_pol_is_unsupported() {
        let g = ArrayGeometry::default().single_pol();
        assert!(matches!(build_type1_codebook(&g, 4, 4), Err(Error::Unsupported(_))));
        assert!(build_type1_codebook(&ArrayGeometry::default(), 0, 4).is_err());
    }

    #[test]
    fn oversampled_subsets_are_orthogonal() {
        for (n1, n2, o1, o2) in [(4, 1, 4, 1), (2, 2, 2, 2), (4, 2, 2, 4), (3, 2, 4, 2)] {
            let g = ArrayGeometry::new(n1, n2, true, 0.5, 0.5).unwrap();
            let cb = build_type1_codebook(&g, o1, o2).unwrap();
            let params = cb.params();
            for r1 in 0..o1 {
                for r2 in 0..o2 {
                    let idx: Vec<usize> = (0..params.horizontal_beams())
                        .filter(|l| l % o1 == r1)
                        .flat_map(|l| {
                            (0..params.vertical_beams())
                                .filter(move |m| m % o2 == r2)
                                .map(move |m| BeamIndex::new(l, m, 0, &params).unwrap().flat)
                        })
                        .collect();
                    assert_eq!(idx.len(), n1 * n2);
                    for (i, &a) in idx.iter().enumerate() {
                        for &b in &idx[i + 1..] {
                            let ip: Complex64 = cb
                                .precoder(a)
                                .iter()
                                .zip(cb.precoder(b))
                                .map(|(x, y)| x.conj() * y)
                                .sum();
                            assert!(ip.norm() < 1e-9, "{a} vs {b}: {ip}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn codebook_is_deterministic() {
        let a = build_type1_codebook(&ArrayGeometry::default(), 4, 4).unwrap();
        let b = build_type1_codebook(&ArrayGeometry::default(), 4, 4).unwrap();
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()));
    }

    #[test]
    fn binary_export_reads_back() {
        let g = ArrayGeometry::new(2, 1, true, 0.5, 0.5).unwrap();
        let cb = build_type1_codebook(&g, 2, 1).unwrap();
        let mut buf = Vec::new();
        cb.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 6 * 4 + cb.len() * cb.ports() * 16);
        let (params, pre) = BeamCodebook::read_binary(&buf[..]).unwrap();
        assert_eq!(params, cb.params());
        for (i, w) in pre.iter().enumerate() {
            assert_eq!(w.as_slice(), cb.precoder(i));
        }
    }

    proptest! {
        #[test]
        fn flat_index_round_trip(n1 in 1usize..9, n2 in 1usize..4, o1 in 1usize..5, o2 in 1usize..5, seed in 0usize..10_000) {
            let params = CodebookParams { n1, n2, o1, o2 };
            let flat = seed % params.size();
            let idx = BeamIndex::from_flat(flat, &params).unwrap();
            prop_assert_eq!(BeamIndex::new(idx.l, idx.m, idx.p, &params).unwrap(), idx);
            prop_assert!(BeamIndex::from_flat(params.size(), &params).is_err());
        }
    }
}
