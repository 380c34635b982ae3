//! Single-channel RIFF/WAVE read and write in the two encodings the toolkit
//! needs: 16-bit integer PCM and 32-bit IEEE float. Unknown chunks are
//! skipped on read; writes go through the atomic path.

use std::path::Path;

use anyhow::Context;

use distilkit_core::signal::Waveform;

use crate::report::atomic_write;
use crate::validation;

const FMT_PCM: u16 = 1;
const FMT_FLOAT: u16 = 3;

fn chunk(out: &mut Vec<u8>, id: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(id);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    if body.len() % 2 == 1 {
        out.push(0);
    }
}

fn fmt_body(format: u16, sample_rate: u32, bits: u16) -> Vec<u8> {
    let block_align = bits / 8;
    let byte_rate = sample_rate * block_align as u32;
    let mut b = Vec::with_capacity(16);
    b.extend_from_slice(&format.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&sample_rate.to_le_bytes());
    b.extend_from_slice(&byte_rate.to_le_bytes());
    b.extend_from_slice(&block_align.to_le_bytes());
    b.extend_from_slice(&bits.to_le_bytes());
    b
}

fn assemble(format: u16, sample_rate: u32, bits: u16, data: Vec<u8>) -> Vec<u8> {
    let mut chunks = Vec::new();
    chunk(&mut chunks, b"fmt ", &fmt_body(format, sample_rate, bits));
    chunk(&mut chunks, b"data", &data);
    let mut out = Vec::with_capacity(chunks.len() + 12);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(4 + chunks.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(&chunks);
    out
}

/// Writes 16-bit PCM; samples are clamped to [-1, 1] and scaled by 32767.
pub fn write_wav_pcm16(path: &Path, w: &Waveform) -> anyhow::Result<()> {
    let mut data = Vec::with_capacity(w.samples.len() * 2);
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        data.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &assemble(FMT_PCM, w.sample_rate, 16, data))
}

/// Writes 32-bit IEEE float samples verbatim (narrowed from f64).
pub fn write_wav_f32(path: &Path, w: &Waveform) -> anyhow::Result<()> {
    let mut data = Vec::with_capacity(w.samples.len() * 4);
    for &s in &w.samples {
        data.extend_from_slice(&(s as f32).to_le_bytes());
    }
    atomic_write(path, &assemble(FMT_FLOAT, w.sample_rate, 32, data))
}

fn take<'a>(buf: &'a [u8], at: usize, n: usize) -> anyhow::Result<&'a [u8]> {
    buf.get(at..at + n).ok_or_else(|| validation("truncated WAV file"))
}

fn u16_at(buf: &[u8], at: usize) -> anyhow::Result<u16> {
    Ok(u16::from_le_bytes(take(buf, at, 2)?.try_into().unwrap()))
}

fn u32_at(buf: &[u8], at: usize) -> anyhow::Result<u32> {
    Ok(u32::from_le_bytes(take(buf, at, 4)?.try_into().unwrap()))
}

/// Reads a mono PCM-16 or float-32 WAV file.
pub fn read_wav(path: &Path) -> anyhow::Result<Waveform> {
    let buf =
        std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if buf.len() < 12 || &buf[0..4] != b"RIFF" || &buf[8..12] != b"WAVE" {
        return Err(validation(format!("{}: not a RIFF/WAVE file", path.display())));
    }
    let mut fmt: Option<(u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut at = 12;
    while at + 8 <= buf.len() {
        let id = &buf[at..at + 4];
        let len = u32_at(&buf, at + 4)? as usize;
        let body = take(&buf, at + 8, len)?;
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(validation("fmt chunk too short"));
                }
                let format = u16_at(body, 0)?;
                let channels = u16_at(body, 2)?;
                let rate = u32_at(body, 4)?;
                let bits = u16_at(body, 14)?;
                if channels != 1 {
                    return Err(validation(format!(
                        "only mono WAV is supported, got {channels} channels"
                    )));
                }
                fmt = Some((format, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunk bodies are padded to even length.
        at += 8 + len + len % 2;
    }
    let (format, rate, bits) =
        fmt.ok_or_else(|| validation("missing fmt chunk"))?;
    let data = data.ok_or_else(|| validation("missing data chunk"))?;
    let samples = match (format, bits) {
        (FMT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32767.0)
            .collect(),
        (FMT_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => {
            return Err(validation(format!(
                "unsupported WAV encoding: format {format}, {bits}-bit"
            )))
        }
    };
    Ok(Waveform { samples, sample_rate: rate })
}
