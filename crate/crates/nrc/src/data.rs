//! Dataset ingestion and generation: the binary feature file format (with a
//! CSV fallback), the embeddings dump, and a synthetic covariate-shift
//! benchmark of Gaussian class clusters.
//!
//! On disk features are f32 and are widened to f64 in memory; the CSV loader
//! parses through f32 so both encodings load to identical values.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"NRCF";
pub const FEATURE_VERSION: u32 = 1;

/// Section tags of the binary feature format.
pub const TAG_FEATURES: u8 = 0;
pub const TAG_FEATURES_LABELS: u8 = 1;
pub const TAG_EMBEDDINGS: u8 = 2;

/// Radius of the circle the synthetic class means sit on.
pub const CLUSTER_RADIUS: f64 = 4.0;

/// Covariate shift applied to the target domain of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Rotation of the class means in the first two coordinates, degrees.
    pub rotation_degrees: f64,
    /// Translation added to both of the first two coordinates.
    pub translation: f64,
    /// Standard deviation of the isotropic cluster noise.
    pub noise_scale: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rotation_degrees: 30.0,
            translation: 0.5,
            noise_scale: 1.0,
        }
    }
}

/// A generated or loaded two-domain dataset. Target labels are carried for
/// evaluation only; the adaptation loop never sees them.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub shift: ShiftSpec,
    pub num_classes: usize,
    pub input_dim: usize,
    pub source_features: Matrix,
    pub source_labels: Vec<usize>,
    pub target_features: Matrix,
    pub target_labels: Vec<usize>,
}

/// Generation settings for the synthetic benchmark. JSON keys mirror the
/// field names; the defaults are the standard benchmark configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub rotation_degrees: f64,
    pub translation: f64,
    pub noise_scale: f64,
    pub seed: u64,
    pub name: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 4,
            dim: 2,
            n_per_class: 500,
            rotation_degrees: 30.0,
            translation: 0.5,
            noise_scale: 1.0,
            seed: 0,
            name: "synthetic-shift".to_string(),
        }
    }
}

impl GenConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn shift(&self) -> ShiftSpec {
        ShiftSpec {
            rotation_degrees: self.rotation_degrees,
            translation: self.translation,
            noise_scale: self.noise_scale,
        }
    }

    pub fn generate(&self) -> Result<DatasetManifest> {
        let mut manifest = generate_synthetic_shift(
            self.classes,
            self.dim,
            self.n_per_class,
            &self.shift(),
            self.seed,
        )?;
        manifest.name = self.name.clone();
        Ok(manifest)
    }
}

/// Synthetic benchmark: source classes are unit-variance Gaussians with means
/// on a circle in the first two coordinates; the target domain rotates and
/// translates the means while keeping the class structure.
pub fn generate_synthetic_shift(
    num_classes: usize,
    input_dim: usize,
    n_per_class: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<DatasetManifest> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if input_dim < 2 {
        return Err(Error::invalid("need at least 2 input dimensions"));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("need at least one sample per class"));
    }
    if shift.noise_scale < 0.0 {
        return Err(Error::invalid("noise scale must be non-negative"));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, shift.noise_scale.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(format!("bad noise scale: {e}")))?;

    let mean_of = |class: usize, rotated: bool| -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
        let (x, y) = (CLUSTER_RADIUS * angle.cos(), CLUSTER_RADIUS * angle.sin());
        let mut mean = vec![0.0; input_dim];
        if rotated {
            let theta = shift.rotation_degrees.to_radians();
            mean[0] = x * theta.cos() - y * theta.sin() + shift.translation;
            mean[1] = x * theta.sin() + y * theta.cos() + shift.translation;
        } else {
            mean[0] = x;
            mean[1] = y;
        }
        mean
    };

    let sample_domain = |rotated: bool, rng: &mut ChaCha20Rng| -> (Matrix, Vec<usize>) {
        let n = num_classes * n_per_class;
        let mut features = Matrix::zeros(n, input_dim);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for class in 0..num_classes {
            let mean = mean_of(class, rotated);
            for _ in 0..n_per_class {
                for (v, &m) in features.row_mut(row).iter_mut().zip(&mean) {
                    *v = m + if shift.noise_scale > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    };
                }
                labels.push(class);
                row += 1;
            }
        }
        (features, labels)
    };

    let (source_features, source_labels) = sample_domain(false, &mut rng);
    let (target_features, target_labels) = sample_domain(true, &mut rng);
    Ok(DatasetManifest {
        name: format!("synthetic-shift-c{num_classes}-d{input_dim}"),
        seed,
        shift: *shift,
        num_classes,
        input_dim,
        source_features,
        source_labels,
        target_features,
        target_labels,
    })
}

// ---------------------------------------------------------------------------
// Binary format
// ---------------------------------------------------------------------------

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::format(
                self.offset,
                format!("truncated file while reading {what}"),
            )),
            Err(e) => Err(e.into()),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }
}

fn checked_dims(rows: u64, cols: u64, offset: u64) -> Result<(usize, usize)> {
    let cells = rows
        .checked_mul(cols)
        .filter(|&c| c <= (1 << 32))
        .ok_or_else(|| Error::format(offset, "dimension overflow"))?;
    let _ = cells;
    Ok((rows as usize, cols as usize))
}

fn write_header(w: &mut impl Write, tag: u8, rows: u64, cols: u64) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&[tag])?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    Ok(())
}

fn matrix_payload(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn labels_payload(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        let v = u32::try_from(l).map_err(|_| Error::invalid("label exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_f32_matrix(bytes: &[u8], rows: usize, cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Matrix::from_vec(rows, cols, data).expect("sized by caller")
}

fn decode_labels(bytes: &[u8]) -> Vec<usize> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect()
}

/// Write a feature matrix (tag 0) or features plus labels (tag 1). The
/// payload (f32 features, then the optional u32 labels) is protected by a
/// trailing CRC32.
pub fn save_features(
    path: impl AsRef<Path>,
    features: &Matrix,
    labels: Option<&[usize]>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != features.rows() {
            return Err(Error::invalid("label count does not match feature rows"));
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let tag = if labels.is_some() {
        TAG_FEATURES_LABELS
    } else {
        TAG_FEATURES
    };
    write_header(&mut w, tag, features.rows() as u64, features.cols() as u64)?;
    let mut payload = matrix_payload(features);
    if let Some(l) = labels {
        payload.extend(labels_payload(l)?);
    }
    w.write_all(&payload)?;
    w.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn load_binary(path: &Path) -> Result<(u8, Vec<u8>, Counting<std::io::BufReader<std::fs::File>>)> {
    let mut r = Counting {
        inner: std::io::BufReader::new(std::fs::File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected NRCF"));
    }
    let version = r.read_u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let tag = r.read_u8("section tag")?;
    Ok((tag, magic.to_vec(), r))
}

fn verify_crc(r: &mut Counting<impl Read>, payload: &[u8]) -> Result<()> {
    let crc_offset = r.offset;
    let stored = r.read_u32("checksum")?;
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::format(
            crc_offset,
            format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }
    Ok(())
}

fn load_features_binary(path: &Path) -> Result<(Matrix, Option<Vec<usize>>)> {
    let (tag, _, mut r) = load_binary(path)?;
    if tag != TAG_FEATURES && tag != TAG_FEATURES_LABELS {
        return Err(Error::format(
            8,
            format!("expected a feature section, found tag {tag}"),
        ));
    }
    let rows_off = r.offset;
    let rows = r.read_u64("row count")?;
    let cols = r.read_u64("column count")?;
    let (rows, cols) = checked_dims(rows, cols, rows_off)?;
    let mut payload = vec![0u8; rows * cols * 4];
    r.read_exact(&mut payload, "feature payload")?;
    let mut label_bytes = Vec::new();
    if tag == TAG_FEATURES_LABELS {
        label_bytes = vec![0u8; rows * 4];
        r.read_exact(&mut label_bytes, "label payload")?;
    }
    let mut full_payload = payload.clone();
    full_payload.extend_from_slice(&label_bytes);
    verify_crc(&mut r, &full_payload)?;
    let features = decode_f32_matrix(&payload, rows, cols);
    let labels = (tag == TAG_FEATURES_LABELS).then(|| decode_labels(&label_bytes));
    Ok((features, labels))
}

/// Load features (and labels, if present). Paths ending in `.csv` use the
/// CSV codec; everything else is read as the binary format.
pub fn load_features(path: impl AsRef<Path>) -> Result<(Matrix, Option<Vec<usize>>)> {
    let path = path.as_ref();
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        load_features_csv(path)
    } else {
        load_features_binary(path)
    }
}

/// Write an embeddings dump (tag 2): features `z` and predictions `p` side by
/// side, with optional labels. The header carries the `z` width so the two
/// matrices can be split on reload.
pub fn save_embeddings(
    path: impl AsRef<Path>,
    z: &Matrix,
    p: &Matrix,
    labels: Option<&[usize]>,
) -> Result<()> {
    if z.rows() != p.rows() {
        return Err(Error::invalid("z/p row count mismatch"));
    }
    if let Some(l) = labels {
        if l.len() != z.rows() {
            return Err(Error::invalid("label count does not match rows"));
        }
    }
    let rows = z.rows();
    let cols = z.cols() + p.cols();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, TAG_EMBEDDINGS, rows as u64, cols as u64)?;
    w.write_all(&(z.cols() as u32).to_le_bytes())?;
    w.write_all(&[labels.is_some() as u8])?;
    let mut payload = Vec::with_capacity(rows * cols * 4);
    for i in 0..rows {
        for &v in z.row(i) {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in p.row(i) {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(l) = labels {
        payload.extend(labels_payload(l)?);
    }
    w.write_all(&payload)?;
    w.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Load an embeddings dump written by [`save_embeddings`].
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(Matrix, Matrix, Option<Vec<usize>>)> {
    let (tag, _, mut r) = load_binary(path.as_ref())?;
    if tag != TAG_EMBEDDINGS {
        return Err(Error::format(
            8,
            format!("expected an embeddings section, found tag {tag}"),
        ));
    }
    let rows_off = r.offset;
    let rows = r.read_u64("row count")?;
    let cols = r.read_u64("column count")?;
    let (rows, cols) = checked_dims(rows, cols, rows_off)?;
    let z_cols_off = r.offset;
    let z_cols = r.read_u32("z width")? as usize;
    if z_cols > cols {
        return Err(Error::format(z_cols_off, "z width exceeds total columns"));
    }
    let has_labels = r.read_u8("label flag")? != 0;
    let mut payload = vec![0u8; rows * cols * 4];
    r.read_exact(&mut payload, "embedding payload")?;
    let mut label_bytes = Vec::new();
    if has_labels {
        label_bytes = vec![0u8; rows * 4];
        r.read_exact(&mut label_bytes, "label payload")?;
    }
    let mut full_payload = payload.clone();
    full_payload.extend_from_slice(&label_bytes);
    verify_crc(&mut r, &full_payload)?;

    let combined = decode_f32_matrix(&payload, rows, cols);
    let p_cols = cols - z_cols;
    let mut z = Matrix::zeros(rows, z_cols);
    let mut p = Matrix::zeros(rows, p_cols);
    for i in 0..rows {
        z.row_mut(i).copy_from_slice(&combined.row(i)[..z_cols]);
        p.row_mut(i).copy_from_slice(&combined.row(i)[z_cols..]);
    }
    let labels = has_labels.then(|| decode_labels(&label_bytes));
    Ok((z, p, labels))
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Write features as CSV with header `f0,...,f{d-1}[,label]`. Values are the
/// f32 projections of the data, printed exactly, so a CSV written here loads
/// identically to the binary encoding.
pub fn save_features_csv(
    path: impl AsRef<Path>,
    features: &Matrix,
    labels: Option<&[usize]>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != features.rows() {
            return Err(Error::invalid("label count does not match feature rows"));
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = (0..features.cols()).map(|i| format!("f{i}")).collect();
    if labels.is_some() {
        header.push("label".to_string());
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..features.rows() {
        let mut cells: Vec<String> = features
            .row(i)
            .iter()
            .map(|&v| format!("{}", v as f32))
            .collect();
        if let Some(l) = labels {
            cells.push(l[i].to_string());
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn load_features_csv(path: &Path) -> Result<(Matrix, Option<Vec<usize>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let mut offset: u64 = 0;
    let header = lines
        .next()
        .ok_or_else(|| Error::format(0, "empty csv file"))?;
    let columns: Vec<&str> = header.split(',').collect();
    let has_label = columns.last().is_some_and(|c| c.trim() == "label");
    let dim = columns.len() - has_label as usize;
    if dim == 0 {
        return Err(Error::format(0, "csv has no feature columns"));
    }
    offset += header.len() as u64 + 1;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for line in lines {
        if line.is_empty() {
            offset += 1;
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(Error::format(
                offset,
                format!("expected {} cells, found {}", columns.len(), cells.len()),
            ));
        }
        let mut row = Vec::with_capacity(dim);
        for cell in &cells[..dim] {
            let v: f32 = cell
                .trim()
                .parse()
                .map_err(|_| Error::format(offset, format!("bad float value {cell:?}")))?;
            row.push(v as f64);
        }
        if has_label {
            let l: u32 = cells[dim]
                .trim()
                .parse()
                .map_err(|_| Error::format(offset, format!("bad label value {:?}", cells[dim])))?;
            labels.push(l as usize);
        }
        rows.push(row);
        offset += line.len() as u64 + 1;
    }
    if rows.is_empty() {
        return Err(Error::format(offset, "csv contains no data rows"));
    }
    let features = Matrix::from_rows(&rows)?;
    Ok((features, has_label.then_some(labels)))
}
