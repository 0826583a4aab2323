//! Manifest + blob container used for checkpoints and graph files.
//!
//! A container is a directory holding `manifest.json` and `data.bin`. The
//! manifest lists every array with its name, shape, dtype and byte offset
//! into the blob; arrays are stored row-major little-endian, back to back.
//! Directories are written to a sibling temp path and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use crate::util::sha256_hex;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{DType, Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "data.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayDType {
    F32,
    F64,
    U32,
    U64,
}

impl ArrayDType {
    fn size(self) -> usize {
        match self {
            ArrayDType::F32 | ArrayDType::U32 => 4,
            ArrayDType::F64 | ArrayDType::U64 => 8,
        }
    }
}

impl From<DType> for ArrayDType {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => ArrayDType::F32,
            DType::F64 => ArrayDType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl ArrayData {
    pub fn dtype(&self) -> ArrayDType {
        match self {
            ArrayData::F32(_) => ArrayDType::F32,
            ArrayData::F64(_) => ArrayDType::F64,
            ArrayData::U32(_) => ArrayDType::U32,
            ArrayData::U64(_) => ArrayDType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read(dtype: ArrayDType, bytes: &[u8]) -> Self {
        match dtype {
            ArrayDType::F32 => ArrayData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            ArrayDType::F64 => ArrayData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            ArrayDType::U32 => ArrayData::U32(
                bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            ArrayDType::U64 => ArrayData::U64(
                bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }

    /// Floating point contents converted to `T`.
    pub fn to_scalars<T: Scalar>(&self) -> Option<Vec<T>> {
        match self {
            ArrayData::F32(v) => Some(v.iter().map(|&x| T::of(x as f64)).collect()),
            ArrayData::F64(v) => Some(v.iter().map(|&x| T::of(x)).collect()),
            _ => None,
        }
    }

    pub fn from_scalars<T: Scalar>(v: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => ArrayData::F32(v.iter().map(|x| x.f64() as f32).collect()),
            DType::F64 => ArrayData::F64(v.iter().map(|x| x.f64()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: ArrayDType,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
    pub blob_len: u64,
    pub blob_sha256: String,
}

/// Loaded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

/// Serialized manifest and blob of a container.
fn encode_container(
    format: &str,
    version: u32,
    meta: serde_json::Value,
    arrays: &[NamedArray],
) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        let expected: usize = a.shape.iter().product();
        if expected != a.data.len() {
            return Err(Error::dim(
                "write_container",
                format!("array `{}` shape {:?} vs {} values", a.name, a.shape, a.data.len()),
            ));
        }
        let offset = blob.len() as u64;
        a.data.write(&mut blob);
        entries.push(ArrayEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            dtype: a.data.dtype(),
            offset,
            len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: format.to_string(),
        version,
        meta,
        arrays: entries,
        blob_len: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
    };
    Ok((serde_json::to_vec_pretty(&manifest)?, blob))
}

/// Digest of the manifest a container with these contents would have; it
/// covers the blob through the manifest's blob digest.
pub fn container_digest(
    format: &str,
    version: u32,
    meta: serde_json::Value,
    arrays: &[NamedArray],
) -> Result<String> {
    let (json, _) = encode_container(format, version, meta, arrays)?;
    Ok(sha256_hex(&json))
}

/// Digest of a container on disk, comparable with [`container_digest`].
pub fn stored_digest(path: &Path) -> Result<String> {
    let mpath = path.join(MANIFEST_FILE);
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(sha256_hex(&raw))
}

/// Writes `path` atomically: contents go to a sibling temp path which is then
/// renamed over any existing directory.
pub fn write_container(
    path: &Path,
    format: &str,
    version: u32,
    meta: serde_json::Value,
    arrays: &[NamedArray],
) -> Result<()> {
    let (json, blob) = encode_container(format, version, meta, arrays)?;
    let tmp = tmp_sibling(path);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fs::write(tmp.join(MANIFEST_FILE), json).map_err(|e| Error::io(&tmp, e))?;
    fs::write(tmp.join(BLOB_FILE), &blob).map_err(|e| Error::io(&tmp, e))?;
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "container".into());
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Reads a container, checking format, version and every length field.
pub fn read_container(path: &Path, format: &str, version: u32) -> Result<Container> {
    let mpath = path.join(MANIFEST_FILE);
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::load(&mpath, format!("bad manifest: {e}")))?;
    if manifest.format != format {
        return Err(Error::load(
            path,
            format!("expected a `{format}` container, found `{}`", manifest.format),
        ));
    }
    if manifest.version != version {
        return Err(Error::load(
            path,
            format!(
                "version mismatch: file has version {}, this build reads version {version}",
                manifest.version
            ),
        ));
    }
    let bpath = path.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() as u64 != manifest.blob_len {
        return Err(Error::load(
            path,
            format!(
                "blob length {} does not match manifest length {}",
                blob.len(),
                manifest.blob_len
            ),
        ));
    }
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::load(path, "blob digest does not match manifest"));
    }
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        let n: usize = e.shape.iter().product();
        let want = (n * e.dtype.size()) as u64;
        let end = e.offset.checked_add(e.len);
        if e.len != want || end.map_or(true, |end| end > manifest.blob_len) {
            return Err(Error::load(
                path,
                format!("array `{}` length field {} is inconsistent", e.name, e.len),
            ));
        }
        let bytes = &blob[e.offset as usize..(e.offset + e.len) as usize];
        arrays.push(NamedArray {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: ArrayData::read(e.dtype, bytes),
        });
    }
    Ok(Container {
        format: manifest.format,
        version: manifest.version,
        meta: manifest.meta,
        arrays,
    })
}

pub const CHECKPOINT_FORMAT: &str = "poigraph-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Saves parameters in their native precision.
pub fn save_params<T: Scalar>(
    path: &Path,
    params: &ParamStore<T>,
    meta: serde_json::Value,
) -> Result<()> {
    let arrays: Vec<NamedArray> = params
        .iter()
        .map(|(name, p)| NamedArray {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            data: ArrayData::from_scalars(p.value.data()),
        })
        .collect();
    write_container(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, meta, &arrays)
}

/// Loads parameters, converting to `T` when the stored precision differs.
pub fn load_params<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let c = read_container(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
    let mut store = ParamStore::new();
    for a in c.arrays {
        let data = a
            .data
            .to_scalars::<T>()
            .ok_or_else(|| Error::load(path, format!("`{}` is not floating point", a.name)))?;
        store.insert(a.name, Tensor::new(a.shape, data)?)?;
    }
    Ok((store, c.meta))
}
