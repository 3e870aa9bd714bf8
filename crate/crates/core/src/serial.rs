//! Serde adapters storing dense matrices as base64-encoded little-endian `f64`
//! in column-major order.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct Encoded {
    rows: usize,
    cols: usize,
    data: String,
}

fn encode(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode<E: serde::de::Error>(data: &str, expected: usize) -> Result<Vec<f64>, E> {
    let bytes = STANDARD.decode(data).map_err(E::custom)?;
    if bytes.len() != expected * 8 {
        return Err(E::custom(format!(
            "expected {} bytes of matrix data, got {}",
            expected * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8 bytes")))
        .collect())
}

pub mod b64_matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        Encoded {
            rows: m.nrows(),
            cols: m.ncols(),
            data: encode(m.as_slice()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let e = Encoded::deserialize(d)?;
        let values = decode(&e.data, e.rows * e.cols)?;
        Ok(DMatrix::from_vec(e.rows, e.cols, values))
    }
}

pub mod b64_vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        Encoded {
            rows: v.len(),
            cols: 1,
            data: encode(v.as_slice()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let e = Encoded::deserialize(d)?;
        if e.cols != 1 {
            return Err(serde::de::Error::custom("vector must have one column"));
        }
        Ok(DVector::from_vec(decode(&e.data, e.rows)?))
    }
}
