//! Per-entity image/text feature vectors.
//!
//! On disk a store is a little-endian `f32` blob (rows in entity-id order,
//! image block then text block) with a JSON sidecar next to it carrying the
//! dimensions and the entity names of each row.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{EntityId, MultiModalKG};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    d_i: usize,
    d_t: usize,
    rows: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    d_i: usize,
    d_t: usize,
    n: usize,
    entity_order: Vec<String>,
}

/// Path of the JSON sidecar belonging to a feature blob.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

impl FeatureStore {
    pub fn from_rows(d_i: usize, d_t: usize, rows: Vec<f32>) -> Result<Self> {
        let width = d_i + d_t;
        if d_i == 0 || d_t == 0 || !rows.len().is_multiple_of(width) {
            return Err(Error::FeatureDims(format!(
                "{} values do not form rows of {d_i}+{d_t}",
                rows.len()
            )));
        }
        if let Some(x) = rows.iter().find(|x| !x.is_finite()) {
            return Err(Error::FeatureDims(format!("non-finite component {x}")));
        }
        Ok(Self { d_i, d_t, rows })
    }

    pub fn d_i(&self) -> usize {
        self.d_i
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn len(&self) -> usize {
        self.rows.len() / (self.d_i + self.d_t)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn row(&self, e: EntityId) -> &[f32] {
        let w = self.d_i + self.d_t;
        &self.rows[e.index() * w..(e.index() + 1) * w]
    }

    pub fn image(&self, e: EntityId) -> &[f32] {
        &self.row(e)[..self.d_i]
    }

    pub fn text(&self, e: EntityId) -> &[f32] {
        &self.row(e)[self.d_i..]
    }

    /// Image rows for `entities`, `len x d_i`.
    pub fn image_matrix(&self, entities: &[EntityId]) -> Matrix {
        let data = entities
            .iter()
            .flat_map(|&e| self.image(e).iter().map(|&x| x as f64))
            .collect();
        Matrix::from_vec(entities.len(), self.d_i, data)
    }

    /// Text rows for `entities`, `len x d_t`.
    pub fn text_matrix(&self, entities: &[EntityId]) -> Matrix {
        let data = entities
            .iter()
            .flat_map(|&e| self.text(e).iter().map(|&x| x as f64))
            .collect();
        Matrix::from_vec(entities.len(), self.d_t, data)
    }

    pub fn save(&self, kg: &MultiModalKG, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.len() != kg.num_entities() {
            return Err(Error::FeatureDims(format!(
                "store has {} rows, graph has {} entities",
                self.len(),
                kg.num_entities()
            )));
        }
        let bytes: Vec<u8> = self.rows.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = Sidecar {
            d_i: self.d_i,
            d_t: self.d_t,
            n: self.len(),
            entity_order: kg.entity_table().names().to_vec(),
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    /// Loads a feature file and realigns its rows to `kg`'s entity ids.
    /// Rows for entities outside `kg` are ignored.
    pub fn load(kg: &MultiModalKG, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        if sidecar.d_i == 0 || sidecar.d_t == 0 {
            return Err(Error::FeatureDims("dimensions must be at least 1".into()));
        }
        if sidecar.entity_order.len() != sidecar.n {
            return Err(Error::FeatureDims(format!(
                "header says n={} but lists {} entities",
                sidecar.n,
                sidecar.entity_order.len()
            )));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let width = sidecar.d_i + sidecar.d_t;
        let expected = sidecar.n * width * 4;
        if bytes.len() != expected {
            return Err(Error::FeatureDims(format!(
                "blob holds {} bytes, expected {expected} for {} rows of {width}",
                bytes.len(),
                sidecar.n
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let mut position = vec![None; kg.num_entities()];
        for (row, name) in sidecar.entity_order.iter().enumerate() {
            if let Ok(e) = kg.entity_id(name) {
                position[e.index()] = Some(row);
            }
        }
        let mut rows = Vec::with_capacity(kg.num_entities() * width);
        for e in kg.entities() {
            let row = position[e.index()]
                .ok_or_else(|| Error::MissingFeature(kg.entity_name(e).to_owned()))?;
            rows.extend_from_slice(&values[row * width..(row + 1) * width]);
        }
        Self::from_rows(sidecar.d_i, sidecar.d_t, rows)
    }
}

/// Deterministic stand-in features: every entity's vector depends only on
/// `seed` and its name, with components uniform in `[-1, 1]`.
pub fn synth_features(kg: &MultiModalKG, seed: u64, d_i: usize, d_t: usize) -> FeatureStore {
    assert!(d_i >= 1 && d_t >= 1, "feature dimensions must be at least 1");
    let mut rows = Vec::with_capacity(kg.num_entities() * (d_i + d_t));
    for e in kg.entities() {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(kg.entity_name(e).as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        rows.extend((0..d_i + d_t).map(|_| rng.gen_range(-1.0f32..=1.0)));
    }
    FeatureStore {
        d_i,
        d_t,
        rows,
    }
}

/// Reads an external entity embedding table: one line per entity, the
/// name followed by whitespace-separated values. Rows are aligned to `kg`;
/// every entity of `kg` must be present.
pub fn load_pretrained(kg: &MultiModalKG, path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; kg.num_entities()];
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(name) = fields.next() else { continue };
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("`{f}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() || values.iter().any(|x| !x.is_finite()) {
            return Err(parse_err("expected finite values after the entity name".into()));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(format!("{} values, earlier rows have {w}", values.len())))
            }
            _ => {}
        }
        if let Ok(e) = kg.entity_id(name) {
            rows[e.index()] = Some(values);
        }
    }
    let width = width.ok_or(Error::Empty("embedding table"))?;
    let mut m = Matrix::zeros(kg.num_entities(), width);
    for e in kg.entities() {
        let row = rows[e.index()]
            .as_ref()
            .ok_or_else(|| Error::MissingFeature(kg.entity_name(e).to_owned()))?;
        m.row_mut(e.index()).copy_from_slice(row);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretrained_rows_follow_entity_ids() {
        let kg = toy();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        fs::write(&p, "c 5 6\nzz 0 0\na 1 2\nb 3 4\n").unwrap();
        let m = load_pretrained(&kg, &p).unwrap();
        assert_eq!(m.row(kg.entity_id("c").unwrap().index()), &[5.0, 6.0]);
        fs::write(&p, "a 1 2\nb 3 4\n").unwrap();
        assert!(matches!(load_pretrained(&kg, &p), Err(Error::MissingFeature(n)) if n == "c"));
        fs::write(&p, "a 1 2\nb 3\n").unwrap();
        assert!(load_pretrained(&kg, &p).is_err());
    }

    fn toy() -> MultiModalKG {
        MultiModalKG::from_named_triples([("a", "r", "b"), ("b", "s", "c")])
    }

    #[test]
    fn save_load_round_trip() {
        let kg = toy();
        let store = synth_features(&kg, 3, 4, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        store.save(&kg, &path).unwrap();
        let back = FeatureStore::load(&kg, &path).unwrap();
        assert_eq!(back, store);
        assert_eq!((back.d_i(), back.d_t()), (4, 3));
    }

    #[test]
    fn short_file_is_rejected() {
        let kg = toy();
        let small = MultiModalKG::from_named_triples([("a", "r", "b")]);
        let store = synth_features(&small, 3, 4, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        store.save(&small, &path).unwrap();
        match FeatureStore::load(&kg, &path) {
            Err(Error::MissingFeature(name)) => assert_eq!(name, "c"),
            other => panic!("expected missing feature, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let kg = toy();
        let store = synth_features(&kg, 3, 4, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        store.save(&kg, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            FeatureStore::load(&kg, &path),
            Err(Error::FeatureDims(_))
        ));
    }

    #[test]
    fn synthesis_is_seeded_and_bounded() {
        let kg = toy();
        assert_eq!(synth_features(&kg, 1, 5, 5), synth_features(&kg, 1, 5, 5));
        assert_ne!(synth_features(&kg, 1, 5, 5), synth_features(&kg, 2, 5, 5));
        let names: Vec<(String, String, String)> = (0..1000)
            .map(|i| (format!("h{i}"), "r".to_owned(), format!("t{i}")))
            .collect();
        let big = MultiModalKG::from_named_triples(
            names.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())),
        );
        let store = synth_features(&big, 9, 3, 2);
        assert!(store.len() * 5 >= 10_000);
        assert!(store.rows.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}
