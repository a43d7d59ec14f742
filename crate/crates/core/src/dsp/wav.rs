use std::io::{Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

fn format_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::format("wav", other.to_string()),
    }
}

/// Reads 16-bit PCM mono; anything else is rejected.
pub fn read_wav_from<R: Read>(reader: R) -> Result<Waveform> {
    let reader = WavReader::new(reader).map_err(format_err)?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            "wav",
            format!("expected 16-bit PCM, got {:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        ));
    }
    if spec.channels != 1 {
        return Err(Error::format("wav", format!("expected mono, got {} channels", spec.channels)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(format_err)?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

pub fn write_wav_to<W: Write + Seek>(w: &Waveform, writer: W) -> Result<()> {
    if w.sample_rate_hz == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut out = WavWriter::new(writer, spec).map_err(format_err)?;
    for &s in &w.samples {
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "write_wav" });
        }
        let v = (s as f64 * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.write_sample(v).map_err(format_err)?;
    }
    out.finalize().map_err(format_err)
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    read_wav_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_wav(w: &Waveform, path: &Path) -> Result<()> {
    write_wav_to(w, std::io::BufWriter::new(std::fs::File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn round_trip_quantises_to_sixteen_bits() {
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 1.0, -1.0, 0.123], 16_000);
        let mut buf = Cursor::new(Vec::new());
        write_wav_to(&w, &mut buf).unwrap();
        let back = read_wav_from(Cursor::new(buf.into_inner())).unwrap();
        assert_eq!(back.sample_rate_hz, 16_000);
        assert_eq!(back.samples[..3], [0.0, 0.5, -0.5]);
        assert_eq!(back.samples[3], 32767.0 / 32768.0);
        assert_eq!(back.samples[4], -1.0);
        assert!((back.samples[5] - 0.123).abs() <= 0.5 / 32768.0);
    }

    #[test]
    fn float_and_stereo_files_rejected() {
        for spec in [
            WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 32, sample_format: SampleFormat::Float },
            WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: SampleFormat::Int },
        ] {
            let mut buf = Cursor::new(Vec::new());
            {
                let mut w = WavWriter::new(&mut buf, spec).unwrap();
                for _ in 0..4 {
                    match spec.sample_format {
                        SampleFormat::Float => w.write_sample(0.0f32).unwrap(),
                        SampleFormat::Int => w.write_sample(0i16).unwrap(),
                    }
                }
                w.finalize().unwrap();
            }
            assert!(matches!(read_wav_from(Cursor::new(buf.into_inner())), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn garbage_rejected() {
        assert!(read_wav_from(Cursor::new(b"not a wav file".to_vec())).is_err());
    }
}
