use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Deinterleaved multi-channel audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

impl Waveform {
    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self {
            sample_rate,
            channels: vec![samples],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err(path))?
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch.max(1)); n_ch];
    for frame in interleaved.chunks(n_ch) {
        for (c, v) in frame.iter().enumerate() {
            channels[c].push(*v);
        }
    }
    Ok(Waveform {
        sample_rate: spec.sample_rate,
        channels,
    })
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let n_ch = wave.n_channels();
    if n_ch == 0 || wave.channels.iter().any(|c| c.len() != wave.len()) {
        return Err(Error::Shape(format!(
            "cannot write {}: channels missing or of unequal length",
            path.display()
        )));
    }
    let spec = WavSpec {
        channels: n_ch as u16,
        sample_rate: wave.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut w = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for i in 0..wave.len() {
        for c in &wave.channels {
            match format {
                WavFormat::Float32 => w.write_sample(c[i] as f32),
                WavFormat::Pcm16 => {
                    let v = (c[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    w.write_sample(v)
                }
            }
            .map_err(wav_err(path))?;
        }
    }
    w.finalize().map_err(wav_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_multichannel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let wave = Waveform {
            sample_rate: 16000,
            channels: vec![vec![0.25, -0.5, 0.125], vec![0.0, 0.75, -1.0]],
        };
        write_wav(&p, &wave, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), wave);
    }

    #[test]
    fn pcm16_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let wave = Waveform::mono(8000, vec![0.1, -0.3, 0.99]);
        write_wav(&p, &wave, WavFormat::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 8000);
        for (a, b) in back.channels[0].iter().zip(&wave.channels[0]) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_wav("/nonexistent/x.wav").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.wav"));
    }
}
