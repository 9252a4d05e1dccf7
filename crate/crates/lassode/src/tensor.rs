//! Dense 2-D tensors and the named parameter store.
//!
//! Everything the model learns lives in a [`ParamStore`], addressable by a
//! slash-separated path such as `backbone/layer0/attn/wq`. Vectors are stored
//! as 1xN row matrices.

use std::collections::BTreeMap;
use std::fmt;

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::LassError;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Tensor { rows, cols, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        let cols = data.len();
        Tensor {
            rows: 1,
            cols,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform init on [-limit, limit].
    pub fn uniform<R: Rng>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn reshaped(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, self.data.len(), "reshape must preserve length");
        Tensor {
            rows,
            cols,
            data: self.data.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
    pub lora_adapter: bool,
}

/// Named parameter map. Iteration order is the lexicographic path order,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Clone, Default, Debug)]
pub struct ParamStore {
    map: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor) {
        self.insert_entry(
            path,
            ParamEntry {
                tensor,
                trainable: true,
                lora_adapter: false,
            },
        );
    }

    /// Trainable tensor flagged as a low-rank adapter factor.
    pub fn insert_adapter(&mut self, path: &str, tensor: Tensor) {
        self.insert_entry(
            path,
            ParamEntry {
                tensor,
                trainable: true,
                lora_adapter: true,
            },
        );
    }

    /// Non-trainable tensor (e.g. an adapter scale).
    pub fn insert_frozen(&mut self, path: &str, tensor: Tensor) {
        self.insert_entry(
            path,
            ParamEntry {
                tensor,
                trainable: false,
                lora_adapter: false,
            },
        );
    }

    pub fn insert_entry(&mut self, path: &str, entry: ParamEntry) {
        assert!(
            !self.map.contains_key(path),
            "duplicate parameter path: {path}"
        );
        self.map.insert(path.to_string(), entry);
    }

    pub fn get(&self, path: &str) -> Option<&ParamEntry> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut ParamEntry> {
        self.map.get_mut(path)
    }

    pub fn tensor(&self, path: &str) -> &Tensor {
        &self
            .map
            .get(path)
            .unwrap_or_else(|| panic!("missing parameter: {path}"))
            .tensor
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<ParamEntry> {
        self.map.remove(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.map.values().map(|e| e.tensor.len()).sum()
    }

    pub fn freeze_all(&mut self) {
        for e in self.map.values_mut() {
            e.trainable = false;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    shape: [usize; 2],
    /// Little-endian f64 bytes, base64; exact round trip.
    data: String,
    trainable: bool,
    #[serde(default)]
    lora_adapter: bool,
}

impl ParamStore {
    pub fn save(&self, path: &std::path::Path) -> Result<(), LassError> {
        let mut out: BTreeMap<&str, CheckpointTensor> = BTreeMap::new();
        for (name, entry) in self.iter() {
            let mut bytes = Vec::with_capacity(entry.tensor.len() * 8);
            for v in entry.tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            out.insert(
                name,
                CheckpointTensor {
                    shape: [entry.tensor.rows(), entry.tensor.cols()],
                    data: base64::engine::general_purpose::STANDARD.encode(&bytes),
                    trainable: entry.trainable,
                    lora_adapter: entry.lora_adapter,
                },
            );
        }
        let json = serde_json::to_string(&out).expect("checkpoint serialization");
        std::fs::write(path, json).map_err(|e| LassError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, LassError> {
        let text = std::fs::read_to_string(path).map_err(|e| LassError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::load_from_str(&text).map_err(|msg| LassError::Parse {
            path: path.display().to_string(),
            message: msg,
        })
    }

    /// Parses checkpoint JSON. Public so untrusted-input fuzzing can reach it.
    pub fn load_from_str(text: &str) -> Result<Self, String> {
        let raw: BTreeMap<String, CheckpointTensor> =
            serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut store = ParamStore::new();
        for (name, ct) in raw {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(&ct.data)
                .map_err(|e| format!("tensor {name}: {e}"))?;
            if bytes.len() % 8 != 0 {
                return Err(format!(
                    "tensor {name}: byte length {} not a multiple of 8",
                    bytes.len()
                ));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let expected = ct.shape[0]
                .checked_mul(ct.shape[1])
                .ok_or_else(|| format!("tensor {name}: shape {:?} overflows", ct.shape))?;
            if data.len() != expected {
                return Err(format!(
                    "tensor {name}: shape {:?} expects {expected} values, got {}",
                    ct.shape,
                    data.len()
                ));
            }
            store.insert_entry(
                &name,
                ParamEntry {
                    tensor: Tensor::from_vec(ct.shape[0], ct.shape[1], data),
                    trainable: ct.trainable,
                    lora_adapter: ct.lora_adapter,
                },
            );
        }
        Ok(store)
    }
}
