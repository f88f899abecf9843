//! SVOL volume files.
//!
//! Layout, little-endian: magic `SVOL`, version `u32`, kind `u8`, channels `u32`,
//! extents `u32 × 3` (D, H, W), then `channels·D·H·W` `f32` values in C order with
//! the channel axis slowest.

use std::fs;
use std::path::Path;

use symtrans_core::deform::{DisplacementField, VelocityField, VolumeImage};
use symtrans_core::loss::LabelMap;
use symtrans_core::{Scalar, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"SVOL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Image = 0,
    Labels = 1,
    Displacement = 2,
    Velocity = 3,
}

impl Kind {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => Kind::Image,
            1 => Kind::Labels,
            2 => Kind::Displacement,
            3 => Kind::Velocity,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Image => "image",
            Kind::Labels => "labels",
            Kind::Displacement => "displacement",
            Kind::Velocity => "velocity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SvolError {
    #[error("truncated header: {0} bytes, need {HEADER_LEN}")]
    TruncatedHeader(usize),
    #[error("bad magic {0:?}, expected \"SVOL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported SVOL version {0}, expected {VERSION}")]
    BadVersion(u32),
    #[error("unknown volume kind {0}")]
    BadKind(u8),
    #[error("payload length mismatch: header implies {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("expected a {expected} volume, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("{kind} volume with {channels} channels")]
    BadChannels { kind: &'static str, channels: u32 },
    #[error("label value {0} is not a non-negative integer")]
    BadLabel(f32),
    #[error("zero extent in {0:?}")]
    ZeroExtent([u32; 3]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Svol {
    pub kind: Kind,
    pub channels: u32,
    pub extents: [u32; 3],
    pub data: Vec<f32>,
}

impl Svol {
    pub fn extents(&self) -> [usize; 3] {
        self.extents.map(|e| e as usize)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.channels.to_le_bytes());
        for e in self.extents {
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SvolError> {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(SvolError::BadMagic(bytes[..4].try_into().expect("four bytes")));
        }
        if bytes.len() < HEADER_LEN {
            return Err(SvolError::TruncatedHeader(bytes.len()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("four bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(SvolError::BadVersion(version));
        }
        let kind = Kind::from_u8(bytes[8]).ok_or(SvolError::BadKind(bytes[8]))?;
        let channels = u32_at(9);
        let extents = [u32_at(13), u32_at(17), u32_at(21)];
        let expected = [channels, extents[0], extents[1], extents[2]]
            .iter()
            .try_fold(4usize, |acc, &n| acc.checked_mul(n as usize))
            .unwrap_or(usize::MAX);
        let actual = bytes.len() - HEADER_LEN;
        if expected != actual {
            return Err(SvolError::LengthMismatch { expected, actual });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let v = Svol {
            kind,
            channels,
            extents,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<(), SvolError> {
        if self.extents.contains(&0) {
            return Err(SvolError::ZeroExtent(self.extents));
        }
        let ok = match self.kind {
            Kind::Image => self.channels >= 1,
            Kind::Labels => self.channels == 1,
            Kind::Displacement | Kind::Velocity => self.channels == 3,
        };
        if !ok {
            return Err(SvolError::BadChannels {
                kind: self.kind.name(),
                channels: self.channels,
            });
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|source| CliError::Svol {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn from_tensor<S: Scalar>(kind: Kind, t: &Tensor<S>) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 4, "SVOL tensors are [C, D, H, W]");
        Svol {
            kind,
            channels: s[0] as u32,
            extents: [s[1] as u32, s[2] as u32, s[3] as u32],
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn image<S: Scalar>(v: &VolumeImage<S>) -> Self {
        Self::from_tensor(Kind::Image, v.tensor())
    }

    pub fn displacement<S: Scalar>(u: &DisplacementField<S>) -> Self {
        Self::from_tensor(Kind::Displacement, u.tensor())
    }

    pub fn labels(l: &LabelMap) -> Self {
        let [d, h, w] = l.extents();
        Svol {
            kind: Kind::Labels,
            channels: 1,
            extents: [d as u32, h as u32, w as u32],
            data: l.labels().iter().map(|&v| v as f32).collect(),
        }
    }

    fn expect(&self, kind: Kind) -> Result<(), SvolError> {
        if self.kind != kind {
            return Err(SvolError::WrongKind {
                expected: kind.name(),
                found: self.kind.name(),
            });
        }
        Ok(())
    }

    pub fn tensor<S: Scalar>(&self) -> Tensor<S> {
        let [d, h, w] = self.extents();
        Tensor::from_fn([self.channels as usize, d, h, w], |i| S::from_f64(self.data[i] as f64))
    }

    pub fn to_image<S: Scalar>(&self) -> Result<VolumeImage<S>, SvolError> {
        self.expect(Kind::Image)?;
        Ok(VolumeImage::new(self.tensor()).expect("validated image"))
    }

    pub fn to_displacement<S: Scalar>(&self) -> Result<DisplacementField<S>, SvolError> {
        self.expect(Kind::Displacement)?;
        Ok(DisplacementField::new(self.tensor()).expect("validated field"))
    }

    pub fn to_velocity<S: Scalar>(&self) -> Result<VelocityField<S>, SvolError> {
        self.expect(Kind::Velocity)?;
        Ok(VelocityField::new(self.tensor()).expect("validated field"))
    }

    pub fn to_labels(&self) -> Result<LabelMap, SvolError> {
        self.expect(Kind::Labels)?;
        let labels = self
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                    Ok(v as u32)
                } else {
                    Err(SvolError::BadLabel(v))
                }
            })
            .collect::<Result<Vec<u32>, _>>()?;
        Ok(LabelMap::new(self.extents(), labels).expect("validated labels"))
    }
}
