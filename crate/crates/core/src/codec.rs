// SPDX-License-Identifier: Apache-2.0

//! Shared framing for the binary file formats: 4 magic bytes, a u16 LE
//! version, a u32 LE header length and a compact JSON header.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub(crate) fn write_preamble<W: Write, H: Serialize>(
    out: &mut W,
    magic: &[u8; 4],
    version: u16,
    header: &H,
) -> std::io::Result<()> {
    let json = serde_json::to_vec(header).map_err(std::io::Error::other)?;
    out.write_all(magic)?;
    out.write_u16::<LittleEndian>(version)?;
    out.write_u32::<LittleEndian>(json.len() as u32)?;
    out.write_all(&json)
}

/// Reads and checks the preamble. `what` names the format in error messages.
pub(crate) fn read_preamble<R: Read, H: DeserializeOwned>(
    input: &mut R,
    magic: &[u8; 4],
    version: u16,
    what: &str,
) -> Result<H> {
    let mut found = [0u8; 4];
    input
        .read_exact(&mut found)
        .map_err(|_| Error::Format(format!("{what}: file too short for magic bytes")))?;
    if &found != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let found_version = input
        .read_u16::<LittleEndian>()
        .map_err(|_| truncated(what, "version"))?;
    if found_version != version {
        return Err(Error::Format(format!(
            "{what}: unsupported version {found_version}, expected {version}"
        )));
    }
    let len = input
        .read_u32::<LittleEndian>()
        .map_err(|_| truncated(what, "header length"))? as usize;
    let mut json = vec![0u8; len];
    input
        .read_exact(&mut json)
        .map_err(|_| truncated(what, "header"))?;
    let text = std::str::from_utf8(&json)
        .map_err(|_| Error::Format(format!("{what}: header is not UTF-8")))?;
    serde_json::from_str(text).map_err(|e| Error::Format(format!("{what}: malformed header: {e}")))
}

pub(crate) fn truncated(what: &str, part: &str) -> Error {
    Error::Format(format!("{what}: truncated while reading {part}"))
}

pub(crate) fn read_f32s<R: Read>(input: &mut R, n: usize, what: &str, part: &str) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    input
        .read_f32_into::<LittleEndian>(&mut out)
        .map_err(|_| truncated(what, part))?;
    Ok(out)
}

pub(crate) fn write_f32s<W: Write>(out: &mut W, values: &[f32]) -> std::io::Result<()> {
    for v in values {
        out.write_f32::<LittleEndian>(*v)?;
    }
    Ok(())
}

/// Errors unless the reader is exhausted.
pub(crate) fn expect_eof<R: Read>(input: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match input.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::Format(format!("{what}: trailing bytes after last record"))),
        Err(e) => Err(Error::Format(format!("{what}: {e}"))),
    }
}
