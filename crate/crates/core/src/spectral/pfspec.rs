//! `PFSPEC v1` spectrum dumps: one ASCII header line
//! `PFSPEC v1 F N sample_rate win hop fft` followed by the row-major
//! little-endian f64 log-amplitude block and then the phase block.

use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;

use super::{AnalysisConfig, Spectrum, WindowKind};
use crate::{Error, Result};

const MAGIC: &str = "PFSPEC";
const VERSION: &str = "v1";

pub fn write_pfspec<W: Write>(mut out: W, s: &Spectrum) -> Result<()> {
    let c = &s.config;
    writeln!(
        out,
        "{MAGIC} {VERSION} {} {} {} {} {} {}",
        s.frames(),
        s.bins(),
        c.sample_rate,
        c.win_len,
        c.hop_len,
        c.fft_size
    )?;
    let mut buf = Vec::with_capacity(16 * s.log_amp.len());
    for v in s.log_amp.iter().chain(s.phase.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_pfspec<R: Read>(input: R) -> Result<Spectrum> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != MAGIC || fields[1] != VERSION {
        return Err(Error::format("PFSPEC header", format!("{:?}", header.trim_end())));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| Error::format("PFSPEC header", format!("bad field {:?}", fields[i])))
    };
    let (frames, bins) = (num(2)?, num(3)?);
    let config = AnalysisConfig {
        sample_rate: num(4)? as u32,
        win_len: num(5)?,
        hop_len: num(6)?,
        fft_size: num(7)?,
        window: WindowKind::Hann,
    };
    config.validate()?;
    if bins != config.bins() {
        return Err(Error::format(
            "PFSPEC header",
            format!("{bins} bins inconsistent with fft size {}", config.fft_size),
        ));
    }
    let count = frames * bins;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != 16 * count {
        return Err(Error::format(
            "PFSPEC body",
            format!("expected {} bytes, found {}", 16 * count, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let (a, p) = values.split_at(count);
    let log_amp = Array2::from_shape_vec((frames, bins), a.to_vec()).expect("sized above");
    let phase = Array2::from_shape_vec((frames, bins), p.to_vec()).expect("sized above");
    Spectrum::new(log_amp, phase, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{stft, Waveform};

    #[test]
    fn dump_round_trips_bit_exact() {
        let cfg = AnalysisConfig::desk();
        let x: Vec<f64> = (0..640).map(|i| (i as f64 * 0.07).sin() * 0.5).collect();
        let s = stft(&Waveform::new(x, 16000), &cfg).unwrap();
        let mut buf = Vec::new();
        write_pfspec(&mut buf, &s).unwrap();
        let header_end = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&buf[..header_end]).unwrap(),
            "PFSPEC v1 21 65 16000 128 32 128"
        );
        let back = read_pfspec(buf.as_slice()).unwrap();
        assert_eq!(back.log_amp, s.log_amp);
        assert_eq!(back.phase, s.phase);
        assert_eq!(back.config, s.config);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let data = b"PFSPEC v1 2 65 16000 128 32 128\n\x00\x00";
        assert!(matches!(read_pfspec(&data[..]), Err(Error::Format { .. })));
        assert!(read_pfspec(&b"PFSPEC v2 1 1\n"[..]).is_err());
    }
}
