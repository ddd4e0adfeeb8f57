//! Dataset container: `manifest.json` plus one binary file per split.
//!
//! Split file layout (little-endian): `b"DLDS"`, `u32` version, `u32`
//! example count, then per example `u32` region count, that many box quads
//! as `f32`, the region and grid features as DLT1 tensors, `u32` caption
//! count and each caption as `u32` length followed by `u32` word ids.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, DatasetManifest, FeatureBundle, Split, TrainExample, Vocab};
use crate::geometry::{BoundingBox, GridLayout};
use crate::metrics::tokenize;
use crate::numerics::io::{load_tensor, read_tensor, read_u32, write_tensor, TensorIoError};

pub const DATASET_MAGIC: &[u8; 4] = b"DLDS";
pub const DATASET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

fn split_file(split: Split) -> String {
    format!("{}.dlds", split.name())
}

fn write_split(path: &Path, examples: &[TrainExample]) -> Result<(), DataError> {
    let io = |e| DataError::io(path, e);
    let tio = |e: TensorIoError| DataError::Invalid(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(DATASET_MAGIC).map_err(io)?;
    w.write_all(&DATASET_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(examples.len() as u32).to_le_bytes()).map_err(io)?;
    for ex in examples {
        let f = &ex.features;
        w.write_all(&(f.boxes.len() as u32).to_le_bytes()).map_err(io)?;
        for b in &f.boxes {
            for c in b.corners() {
                w.write_all(&(c as f32).to_le_bytes()).map_err(io)?;
            }
        }
        write_tensor(&mut w, &f.regions).map_err(tio)?;
        write_tensor(&mut w, &f.grids).map_err(tio)?;
        w.write_all(&(ex.captions.len() as u32).to_le_bytes()).map_err(io)?;
        for cap in &ex.captions {
            w.write_all(&(cap.len() as u32).to_le_bytes()).map_err(io)?;
            for &id in cap {
                w.write_all(&(id as u32).to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

fn read_example<R: Read>(r: &mut R, layout: GridLayout, vocab_len: usize) -> Result<TrainExample, String> {
    let n = read_u32(r).map_err(|e| e.to_string())? as usize;
    if n > 4096 {
        return Err(format!("implausible region count {n}"));
    }
    let mut boxes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut c = [0.0; 4];
        for v in &mut c {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| e.to_string())?;
            *v = f32::from_le_bytes(b) as f64;
        }
        boxes.push(BoundingBox::from_array(c).map_err(|e| e.to_string())?);
    }
    let regions = read_tensor(r).map_err(|e| e.to_string())?;
    let grids = read_tensor(r).map_err(|e| e.to_string())?;
    let features = FeatureBundle::new(regions, grids, boxes, layout).map_err(|e| e.to_string())?;
    let n_caps = read_u32(r).map_err(|e| e.to_string())? as usize;
    let mut captions = Vec::with_capacity(n_caps.min(64));
    for _ in 0..n_caps {
        let len = read_u32(r).map_err(|e| e.to_string())? as usize;
        let mut cap = Vec::with_capacity(len.min(256));
        for _ in 0..len {
            let id = read_u32(r).map_err(|e| e.to_string())? as usize;
            if id >= vocab_len {
                return Err(format!("word id {id} outside vocabulary of {vocab_len}"));
            }
            cap.push(id);
        }
        captions.push(cap);
    }
    Ok(TrainExample { features, captions })
}

fn read_split(path: &Path, layout: GridLayout, vocab_len: usize) -> Result<Vec<TrainExample>, DataError> {
    let file = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| DataError::io(path, e))?);
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() || &magic != DATASET_MAGIC {
        return Err(DataError::BadMagic { file });
    }
    let header = |r: &mut BufReader<File>| read_u32(r).map_err(|e| DataError::Truncated { file: file.clone(), example: 0, detail: e.to_string() });
    let version = header(&mut r)?;
    if version != DATASET_VERSION {
        return Err(DataError::Version { file, found: version });
    }
    let count = header(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for example in 0..count {
        let ex = read_example(&mut r, layout, vocab_len).map_err(|detail| DataError::Truncated { file: file.clone(), example, detail })?;
        out.push(ex);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| DataError::io(path, e))? != 0 {
        return Err(DataError::Truncated { file, example: count, detail: "trailing bytes".into() });
    }
    Ok(out)
}

/// Writes the manifest and the three split files into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for split in Split::ALL {
        write_split(&dir.join(split_file(split)), data.split(split))?;
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&data.manifest).map_err(|e| DataError::Invalid(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| DataError::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    if manifest.format != "DLDS" || manifest.version != DATASET_VERSION {
        return Err(DataError::Version { file: path.display().to_string(), found: manifest.version });
    }
    let layout: GridLayout = manifest.layout.parse().map_err(|e| DataError::Invalid(format!("layout: {e}")))?;
    let vocab_len = Vocab::from_words(manifest.vocab.clone())?.len();
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        splits.push(read_split(&dir.join(split_file(split)), layout, vocab_len)?);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let c = &manifest.counts;
    if (c.train, c.val, c.test) != (train.len(), val.len(), test.len()) {
        return Err(DataError::Invalid("split sizes disagree with manifest".into()));
    }
    for ex in train.iter().chain(&val).chain(&test) {
        if ex.features.region_dim() != manifest.region_dim || ex.features.grid_dim() != manifest.grid_dim {
            return Err(DataError::Invalid("feature widths disagree with manifest".into()));
        }
    }
    Ok(Dataset { manifest, train, val, test })
}

/// Converts pre-extracted features into examples. For each stem `NAME` the
/// directory holds `NAME.regions.dlt` (`[n, d_r]`), `NAME.grids.dlt`
/// (`[rows * cols, d_g]`), `NAME.boxes.dlt` (`[n, 4]` corner quads) and
/// optionally `NAME.captions.txt` with one reference per line. Stems are
/// processed in sorted order.
pub fn import_external(dir: &Path, layout: GridLayout, vocab: &Vocab) -> Result<Vec<TrainExample>, DataError> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".regions.dlt")).map(str::to_owned))
        .collect();
    stems.sort();
    let load = |p: &Path| load_tensor(p).map_err(|e| DataError::Invalid(format!("{}: {e}", p.display())));
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let regions = load(&dir.join(format!("{stem}.regions.dlt")))?;
        let grids = load(&dir.join(format!("{stem}.grids.dlt")))?;
        let quads = load(&dir.join(format!("{stem}.boxes.dlt")))?;
        if quads.rank() != 2 || quads.shape()[1] != 4 {
            return Err(DataError::Invalid(format!("{stem}: boxes must be [n, 4], got {:?}", quads.shape())));
        }
        let boxes = quads
            .data()
            .chunks(4)
            .map(|c| BoundingBox::from_array([c[0], c[1], c[2], c[3]]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Invalid(format!("{stem}: {e}")))?;
        let features = FeatureBundle::new(regions, grids, boxes, layout)?;
        let cap_path = dir.join(format!("{stem}.captions.txt"));
        let captions = if cap_path.exists() {
            let text = fs::read_to_string(&cap_path).map_err(|e| DataError::io(&cap_path, e))?;
            text.lines()
                .map(tokenize)
                .filter(|t| !t.is_empty())
                .map(|t| vocab.encode(&t))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        out.push(TrainExample { features, captions });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use crate::numerics::io::save_tensor;
    use crate::numerics::Tensor;

    fn corpus() -> Dataset {
        generate_corpus(40, 9, GridLayout::new(4, 4).unwrap()).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = corpus();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn empty_split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = corpus();
        d.val.clear();
        d.manifest.counts.val = 0;
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &corpus()).unwrap();
        let p = dir.path().join("train.dlds");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn truncation_names_the_example() {
        let dir = tempfile::tempdir().unwrap();
        let d = corpus();
        write_dataset(dir.path(), &d).unwrap();
        let p = dir.path().join("test.dlds");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::Truncated { example, .. }) => assert_eq!(example, d.test.len() - 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn external_import_matches_container() {
        let dir = tempfile::tempdir().unwrap();
        let d = corpus();
        let vocab = d.vocab().unwrap();
        for (i, ex) in d.train.iter().take(3).enumerate() {
            let f = &ex.features;
            save_tensor(&dir.path().join(format!("img{i}.regions.dlt")), &f.regions).unwrap();
            save_tensor(&dir.path().join(format!("img{i}.grids.dlt")), &f.grids).unwrap();
            let quads: Vec<f64> = f.boxes.iter().flat_map(|b| b.corners()).collect();
            save_tensor(&dir.path().join(format!("img{i}.boxes.dlt")), &Tensor::new(vec![f.boxes.len(), 4], quads).unwrap()).unwrap();
            let text: Vec<String> = ex.captions.iter().map(|c| vocab.decode(c).join(" ")).collect();
            fs::write(dir.path().join(format!("img{i}.captions.txt")), text.join("\n")).unwrap();
        }
        let imported = import_external(dir.path(), d.layout().unwrap(), &vocab).unwrap();
        assert_eq!(imported, d.train[..3].to_vec());
    }
}
