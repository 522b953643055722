use std::path::Path;

use crate::audio::{AudioSignal, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&self, offset: usize, len: usize, what: &str) -> Result<&[u8]> {
        self.bytes
            .get(offset..offset + len)
            .ok_or_else(|| self.err(offset, format!("file ends inside {what}")))
    }

    fn u16(&self, offset: usize, what: &str) -> Result<u16> {
        let b = self.take(offset, 2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, offset: usize, what: &str) -> Result<u32> {
        let b = self.take(offset, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes a RIFF/WAVE PCM16 file (mono or stereo) at its native rate.
/// Samples are scaled by 1/32768 and stereo channels averaged.
pub fn decode_wav(bytes: &[u8], origin: &Path) -> Result<AudioSignal> {
    let c = Cursor { bytes, path: origin };
    if c.take(0, 4, "RIFF header")? != b"RIFF" {
        return Err(c.err(0, "missing RIFF signature"));
    }
    if c.take(8, 4, "RIFF header")? != b"WAVE" {
        return Err(c.err(8, "RIFF form type is not WAVE"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u32)> = None;
    loop {
        if pos + 8 > bytes.len() {
            return Err(c.err(pos, "no data chunk found"));
        }
        let id = c.take(pos, 4, "chunk header")?;
        let size = c.u32(pos + 4, "chunk header")? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(c.err(pos + 4, format!("fmt chunk of {size} bytes is too small")));
                }
                let tag = c.u16(body, "fmt chunk")?;
                let channels = c.u16(body + 2, "fmt chunk")?;
                let rate = c.u32(body + 4, "fmt chunk")?;
                let bits = c.u16(body + 14, "fmt chunk")?;
                let pcm = match tag {
                    FORMAT_PCM => true,
                    FORMAT_EXTENSIBLE if size >= 40 => c.u16(body + 24, "fmt extension")? == FORMAT_PCM,
                    _ => false,
                };
                if !pcm {
                    return Err(c.err(body, format!("unsupported encoding (format tag {tag:#06x}); only PCM is read")));
                }
                if bits != 16 {
                    return Err(c.err(body + 14, format!("{bits}-bit samples; only 16-bit PCM is read")));
                }
                if !(channels == 1 || channels == 2) {
                    return Err(c.err(body + 2, format!("{channels} channels; only mono or stereo is read")));
                }
                if rate == 0 {
                    return Err(c.err(body + 4, "sample rate is zero"));
                }
                fmt = Some((channels, rate));
            }
            b"data" => {
                let (channels, rate) = fmt.ok_or_else(|| c.err(pos, "data chunk before fmt chunk"))?;
                let data = c.take(body, size, "data chunk")?;
                let frame = 2 * channels as usize;
                if !size.is_multiple_of(frame) {
                    return Err(c.err(pos + 4, format!("data size {size} is not a whole number of {frame}-byte frames")));
                }
                let samples = data
                    .chunks_exact(frame)
                    .map(|f| {
                        let s: f64 = f
                            .chunks_exact(2)
                            .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
                            .sum();
                        s / f64::from(channels)
                    })
                    .collect();
                return AudioSignal::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
}

pub fn load_wav_native(path: &Path) -> Result<AudioSignal> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes, path)
}

/// Reads a WAV file and resamples it to 16 kHz.
pub fn load_wav(path: &Path) -> Result<AudioSignal> {
    let s = load_wav_native(path)?;
    if s.sample_rate() == CANONICAL_SAMPLE_RATE {
        Ok(s)
    } else {
        s.resample(CANONICAL_SAMPLE_RATE)
    }
}
