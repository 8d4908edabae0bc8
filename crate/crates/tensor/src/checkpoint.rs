//! Checkpoint layout: one line of compact JSON (the header), a `\n`, then the
//! little-endian `f64` payload of every tensor concatenated in name order.
//! A tensor with optimizer state is followed directly by its first and second
//! moment buffers.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::store::Param;
use crate::{Error, ParameterStore, Result, Tensor};

const FORMAT: &str = "ufrec-tensor/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    #[serde(default)]
    pub frozen_rows: Vec<usize>,
    #[serde(default)]
    pub moments: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn write_payload<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_payload<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("payload truncated: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParameterStore, seed: u64, extra: serde_json::Value) -> Result<()> {
    let ordered: Vec<&Param> = store.ids_by_name().map(|id| &store.params()[id.index()]).collect();
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        step: store.step(),
        seed,
        tensors: ordered
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                frozen_rows: p.frozen_rows.clone(),
                moments: p.moment1.is_some() && p.moment2.is_some(),
            })
            .collect(),
        extra,
    };
    let line = serde_json::to_string(&header)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for p in ordered {
        write_payload(w, p.value.data())?;
        if let (Some(m), Some(v)) = (&p.moment1, &p.moment2) {
            write_payload(w, m)?;
            write_payload(w, v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ParameterStore, CheckpointHeader)> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|e| Error::Format(format!("header truncated: {e}")))?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    let header: CheckpointHeader = serde_json::from_slice(&line)?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("unknown format `{}`", header.format)));
    }
    let mut store = ParameterStore::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let value = Tensor::new(entry.shape.clone(), read_payload(r, n)?)?;
        let id = store.insert(&entry.name, value, entry.trainable)?;
        let p = &mut store.params_mut()[id.index()];
        p.frozen_rows = entry.frozen_rows.clone();
        if entry.moments {
            p.moment1 = Some(read_payload(r, n)?);
            p.moment2 = Some(read_payload(r, n)?);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    store.step = header.step;
    Ok((store, header))
}
