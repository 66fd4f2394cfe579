//! `PXN1` model files, little-endian:
//! - magic `PXN1`
//! - layer count: u32
//! - per layer: in_dim, out_dim, activation code (0 identity, 1 relu): u32
//! - per layer: weights (row-major) then biases, f64

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Layer, LayerSpec, MlpModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"PXN1";

fn malformed(message: impl Into<String>) -> Error {
    Error::Malformed {
        what: "model",
        message: message.into(),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| malformed(format!("header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_model(model: &MlpModel, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for l in model.layers() {
        for v in [l.spec.in_dim as u32, l.spec.out_dim as u32, l.spec.activation.code()] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for p in model.parameters() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<MlpModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| malformed(format!("magic: {e}")))?;
    if &magic != MODEL_MAGIC {
        return Err(malformed(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let count = read_u32(r)? as usize;
    if count == 0 || count > 1024 {
        return Err(malformed(format!("implausible layer count {count}")));
    }
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let in_dim = read_u32(r)? as usize;
        let out_dim = read_u32(r)? as usize;
        let code = read_u32(r)?;
        let activation = Activation::from_code(code)
            .ok_or_else(|| malformed(format!("unknown activation code {code}")))?;
        specs.push(LayerSpec::new(in_dim, out_dim, activation));
    }
    let mut layers = Vec::with_capacity(count);
    for spec in specs {
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|e| malformed(format!("parameters: {e}")))?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let weights = read_vec(spec.in_dim * spec.out_dim)?;
        let biases = read_vec(spec.out_dim)?;
        layers.push(Layer {
            spec,
            weights,
            biases,
        });
    }
    MlpModel::from_layers(layers)
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_model(model, &mut bytes).expect("writing to a Vec cannot fail");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let model = read_model(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            found: cursor.len(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_exactly(dims in prop::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            let specs: Vec<_> = dims
                .windows(2)
                .map(|w| LayerSpec::new(w[0], w[1], if seed % 2 == 0 { Activation::Relu } else { Activation::Identity }))
                .collect();
            let model = init_model(&specs, seed).unwrap();
            let mut bytes = Vec::new();
            write_model(&model, &mut bytes).unwrap();
            let back = read_model(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back, model);
        }
    }

    #[test]
    fn layout_is_header_then_parameters() {
        let model = MlpModel::from_layers(vec![Layer {
            spec: LayerSpec::new(1, 1, Activation::Relu),
            weights: vec![2.0],
            biases: vec![-1.0],
        }])
        .unwrap();
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PXN1");
        assert_eq!(bytes.len(), 4 + 4 + 12 + 16);
        assert_eq!(&bytes[20..28], &2.0f64.to_le_bytes());
        assert_eq!(&bytes[28..36], &(-1.0f64).to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_model(&mut &b"PXN2\x01\0\0\0"[..]).is_err());
        assert!(read_model(&mut &b"PXN1\x01\0\0\0\x01\0\0\0"[..]).is_err());
    }
}
