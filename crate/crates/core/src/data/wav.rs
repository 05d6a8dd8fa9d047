use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::synth::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Reads a PCM16 mono 16 kHz WAV file into samples scaled by 1/32768.
pub fn load_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected mono, found {} channels", spec.channels),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::format(
            path,
            format!(
                "expected sample rate {SAMPLE_RATE} Hz, found {} Hz",
                spec.sample_rate
            ),
        ));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit PCM, found {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    reader
        .samples::<i16>()
        .map(|s| Ok(s? as f64 / 32768.0))
        .collect()
}

/// Writes samples as PCM16 mono 16 kHz, clipping to the representable range.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, rate: u32, samples: &[i16]) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn scaling_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, 1, 16000, &[16384, -32768, 0, 1]);
        assert_eq!(load_wav(&p).unwrap(), vec![0.5, -1.0, 0.0, 1.0 / 32768.0]);

        let q = dir.path().join("b.wav");
        let x = vec![0.25, -0.5, 0.999, -0.0001];
        write_wav(&q, &x).unwrap();
        let back = load_wav(&q).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 32768.0);
        }
        // PCM16 values survive exactly
        write_wav(&q, &back).unwrap();
        assert_eq!(load_wav(&q).unwrap(), back);
    }

    #[test]
    fn rejects_stereo_and_wrong_rate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 2, 16000, &[1, 2, 3, 4]);
        let err = load_wav(&p).unwrap_err().to_string();
        assert!(err.contains("expected mono"), "{err}");

        let p = dir.path().join("r.wav");
        write_raw(&p, 1, 8000, &[1, 2]);
        let err = load_wav(&p).unwrap_err().to_string();
        assert!(err.contains("16000") && err.contains("8000"), "{err}");
    }
}
