//! Versioned binary checkpoint of the trained model plus the neighbor
//! embeddings installed by graph expansion.
//!
//! Layout (little-endian): magic, version u32, 32-byte config hash, variant
//! u8, dim/users/items u64, user table, item table, GNN tensors in declaration
//! order (rows u64, cols u64, values), neighbor lists (count u64, then per user
//! id u64, length u64, values), and a SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use fedgnn::model::{GnnVariant, GnnWeights, Matrix, ModelParams, NamedTensor};

use crate::error::CliError;

const MAGIC: &[u8; 8] = b"FGNNCKPT";
const VERSION: u32 = 1;

pub type ConfigHash = [u8; 32];

pub fn config_hash(echo: &[(&str, String)]) -> ConfigHash {
    let mut h = Sha256::new();
    for (k, v) in echo {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: ConfigHash,
    pub params: ModelParams,
    pub neighbors: BTreeMap<usize, Vec<Vec<f64>>>,
}

fn variant_tag(v: GnnVariant) -> u8 {
    match v {
        GnnVariant::Gat => 0,
        GnnVariant::Gcn => 1,
        GnnVariant::Ggnn => 2,
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.push(variant_tag(p.variant()));
        put_u64(&mut out, p.dim);
        put_u64(&mut out, p.user_count());
        put_u64(&mut out, p.item_count());
        put_f64s(&mut out, &p.user_embeddings.data);
        put_f64s(&mut out, &p.item_embeddings.data);
        for t in &p.gnn.tensors {
            put_u64(&mut out, t.value.rows);
            put_u64(&mut out, t.value.cols);
            put_f64s(&mut out, &t.value.data);
        }
        put_u64(&mut out, self.neighbors.len());
        for (&user, list) in &self.neighbors {
            put_u64(&mut out, user);
            put_u64(&mut out, list.len());
            for e in list {
                put_f64s(&mut out, e);
            }
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CliError::checkpoint("not a fedgnn checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CliError::checkpoint("checksum mismatch"));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CliError::checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config_hash: ConfigHash = r.take(32)?.try_into().expect("32 bytes");
        let variant = match r.take(1)?[0] {
            0 => GnnVariant::Gat,
            1 => GnnVariant::Gcn,
            2 => GnnVariant::Ggnn,
            t => return Err(CliError::checkpoint(format!("unknown variant tag {t}"))),
        };
        let dim = r.u64()?;
        let users = r.u64()?;
        let items = r.u64()?;
        let user_embeddings = r.matrix(users, dim)?;
        let item_embeddings = r.matrix(items, dim)?;
        let mut tensors = Vec::new();
        for (name, rows, cols) in variant.weight_shapes(dim) {
            let (rr, cc) = (r.u64()?, r.u64()?);
            if (rr, cc) != (rows, cols) {
                return Err(CliError::checkpoint(format!(
                    "tensor {name} has shape {rr}x{cc}, expected {rows}x{cols}"
                )));
            }
            tensors.push(NamedTensor {
                name,
                value: r.matrix(rows, cols)?,
            });
        }
        let mut neighbors = BTreeMap::new();
        for _ in 0..r.u64()? {
            let user = r.u64()?;
            let n = r.u64()?;
            let list = (0..n)
                .map(|_| r.f64s(dim))
                .collect::<Result<Vec<_>, _>>()?;
            neighbors.insert(user, list);
        }
        if r.pos != body.len() {
            return Err(CliError::checkpoint("trailing bytes"));
        }
        Ok(Self {
            config_hash,
            params: ModelParams {
                dim,
                user_embeddings,
                item_embeddings,
                gnn: GnnWeights { variant, tensors },
            },
            neighbors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.encode())
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CliError::checkpoint("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize, CliError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CliError::checkpoint("size out of range"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| CliError::checkpoint("size out of range"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, CliError> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CliError::checkpoint("size out of range"))?;
        Ok(Matrix {
            rows,
            cols,
            data: self.f64s(n)?,
        })
    }
}
