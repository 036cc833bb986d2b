//! Sidecar file of hidden-state traces: concatenated little-endian `f64`
//! matrices, located through each sample's [`HiddenTraceRef`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{CorpusSample, HiddenTraceRef};
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Writes `traces[i]` for `samples[i]` into `dir/file_name` and records the
/// location on each sample. Samples with an empty trace get no reference.
pub fn write_traces(
    samples: &mut [CorpusSample],
    traces: &[Matrix],
    dir: &Path,
    file_name: &str,
) -> Result<()> {
    if samples.len() != traces.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} traces",
            samples.len(),
            traces.len()
        )));
    }
    let path = dir.join(file_name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut offset = 0u64;
    for (s, t) in samples.iter_mut().zip(traces) {
        if t.is_empty() {
            s.hidden_trace_ref = None;
            continue;
        }
        for v in t.as_slice() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        s.hidden_trace_ref = Some(HiddenTraceRef {
            path: file_name.to_string(),
            offset,
            len: t.len() as u64,
            rows: t.rows() as u32,
            cols: t.cols() as u32,
        });
        offset += t.len() as u64;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads every referenced trace; paths are resolved relative to `dir`.
/// Samples without a reference yield an empty matrix.
pub fn read_traces(samples: &[CorpusSample], dir: &Path) -> Result<Vec<Matrix>> {
    let mut cache: Vec<(String, Vec<u8>)> = Vec::new();
    samples
        .iter()
        .map(|s| {
            let Some(r) = &s.hidden_trace_ref else {
                return Ok(Matrix::zeros(0, 0));
            };
            if !cache.iter().any(|(p, _)| *p == r.path) {
                let path = dir.join(&r.path);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                cache.push((r.path.clone(), bytes));
            }
            let bytes = &cache.iter().find(|(p, _)| *p == r.path).expect("cached").1;
            let (start, end) = (r.offset as usize * 8, (r.offset + r.len) as usize * 8);
            if r.len != u64::from(r.rows) * u64::from(r.cols) || end > bytes.len() {
                return Err(Error::Format(format!(
                    "trace of sample {} does not fit {}",
                    s.sample_id, r.path
                )));
            }
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Matrix::from_vec(r.rows as usize, r.cols as usize, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec, Generator};

    #[test]
    fn traces_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = generate(&CorpusSpec::new(Generator::Arithmetic, 3, 1)).unwrap();
        let traces = vec![
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.5]]).unwrap(),
            Matrix::zeros(0, 0),
            Matrix::row_vector(vec![-1.0, 0.25]),
        ];
        write_traces(&mut samples, &traces, dir.path(), "t.bin").unwrap();
        assert!(samples[1].hidden_trace_ref.is_none());
        assert_eq!(samples[2].hidden_trace_ref.as_ref().unwrap().offset, 4);
        assert_eq!(read_traces(&samples, dir.path()).unwrap(), traces);

        samples[2].hidden_trace_ref.as_mut().unwrap().offset = 5;
        assert!(matches!(read_traces(&samples, dir.path()), Err(Error::Format(_))));
    }
}
