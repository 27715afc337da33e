//! Import-directory parsing for 32- and 64-bit PE images.
//!
//! All reads are bounds-checked against the input buffer; nothing is ever
//! read past it. Hard caps on descriptor and thunk counts keep hostile
//! inputs from turning into unbounded loops.

use super::{ImportEntry, ImportSymbol, ImportTable, PeError};

const DOS_MAGIC: &[u8; 2] = b"MZ";
const PE_MAGIC: &[u8; 4] = b"PE\0\0";
const OPT_MAGIC_PE32: u16 = 0x10b;
const OPT_MAGIC_PE32_PLUS: u16 = 0x20b;
const IMPORT_DIRECTORY_INDEX: usize = 1;
const DESCRIPTOR_SIZE: usize = 20;
const SECTION_HEADER_SIZE: usize = 40;

const MAX_DESCRIPTORS: usize = 4096;
const MAX_THUNKS: usize = 65536;
const MAX_NAME_LEN: usize = 4096;

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn bytes(&self, offset: usize, len: usize, what: &'static str) -> Result<&'a [u8], PeError> {
        let end = offset.checked_add(len).ok_or(PeError::TruncatedHeader("offset overflow"))?;
        if end > self.data.len() {
            return Err(PeError::TruncatedHeader(what));
        }
        Ok(&self.data[offset..end])
    }

    fn u16(&self, offset: usize, what: &'static str) -> Result<u16, PeError> {
        let b = self.bytes(offset, 2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, offset: usize, what: &'static str) -> Result<u32, PeError> {
        let b = self.bytes(offset, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&self, offset: usize, what: &'static str) -> Result<u64, PeError> {
        let b = self.bytes(offset, 8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    /// NUL-terminated string at `offset`, capped at `MAX_NAME_LEN`.
    fn cstr(&self, offset: usize, what: &'static str) -> Result<String, PeError> {
        if offset >= self.data.len() {
            return Err(PeError::MalformedImportDirectory(what));
        }
        let tail = &self.data[offset..];
        let end = tail
            .iter()
            .take(MAX_NAME_LEN)
            .position(|&b| b == 0)
            .ok_or(PeError::MalformedImportDirectory(what))?;
        if end == 0 {
            return Err(PeError::MalformedImportDirectory(what));
        }
        String::from_utf8(tail[..end].to_vec()).map_err(|_| PeError::MalformedImportDirectory(what))
    }
}

#[derive(Debug, Clone, Copy)]
struct Section {
    virtual_address: u32,
    virtual_size: u32,
    raw_size: u32,
    raw_pointer: u32,
}

struct Layout {
    is_64: bool,
    import_rva: u32,
    sections: Vec<Section>,
}

impl Layout {
    /// Translate an RVA to a file offset through the section table.
    fn rva_to_offset(&self, rva: u32) -> Result<usize, PeError> {
        for s in &self.sections {
            let span = s.virtual_size.max(s.raw_size);
            if rva >= s.virtual_address && rva < s.virtual_address.saturating_add(span) {
                let delta = rva - s.virtual_address;
                if delta >= s.raw_size {
                    // lives in the zero-padded tail of the section image
                    return Err(PeError::MalformedImportDirectory("rva beyond raw data"));
                }
                return Ok(s.raw_pointer as usize + delta as usize);
            }
        }
        Err(PeError::MalformedImportDirectory("rva outside all sections"))
    }
}

fn parse_layout(r: &Reader) -> Result<Layout, PeError> {
    if r.bytes(0, 2, "dos magic")? != DOS_MAGIC {
        return Err(PeError::NotPe("missing MZ signature"));
    }
    let e_lfanew = r.u32(0x3c, "e_lfanew")? as usize;
    if r.bytes(e_lfanew, 4, "pe signature")? != PE_MAGIC {
        return Err(PeError::NotPe("missing PE signature"));
    }
    let coff = e_lfanew + 4;
    let n_sections = r.u16(coff + 2, "section count")? as usize;
    let opt_size = r.u16(coff + 16, "optional header size")? as usize;
    let opt = coff + 20;
    if opt_size < 2 {
        return Err(PeError::TruncatedHeader("optional header"));
    }
    let magic = r.u16(opt, "optional header magic")?;
    let (is_64, dir_count_off, dirs_off) = match magic {
        OPT_MAGIC_PE32 => (false, 92usize, 96usize),
        OPT_MAGIC_PE32_PLUS => (true, 108, 112),
        _ => return Err(PeError::NotPe("unknown optional header magic")),
    };
    if opt_size < dirs_off {
        // no room for any data directory: treat as import-free
        return Ok(Layout { is_64, import_rva: 0, sections: vec![] });
    }
    let dir_count = r.u32(opt + dir_count_off, "data directory count")? as usize;
    let import_rva = if dir_count > IMPORT_DIRECTORY_INDEX {
        r.u32(opt + dirs_off + IMPORT_DIRECTORY_INDEX * 8, "import directory rva")?
    } else {
        0
    };

    let mut sections = Vec::with_capacity(n_sections.min(96));
    let table = opt + opt_size;
    for i in 0..n_sections {
        let base = table + i * SECTION_HEADER_SIZE;
        r.bytes(base, SECTION_HEADER_SIZE, "section header")?;
        sections.push(Section {
            virtual_size: r.u32(base + 8, "section vsize")?,
            virtual_address: r.u32(base + 12, "section va")?,
            raw_size: r.u32(base + 16, "section raw size")?,
            raw_pointer: r.u32(base + 20, "section raw ptr")?,
        });
    }
    Ok(Layout { is_64, import_rva, sections })
}

/// Parse the classic import directory of a PE image.
///
/// Entries come back in descriptor order, then thunk order within each
/// descriptor. A missing or empty import directory yields an empty table.
pub fn parse_imports(pe_bytes: &[u8]) -> Result<ImportTable, PeError> {
    let r = Reader { data: pe_bytes };
    let layout = parse_layout(&r)?;
    if layout.import_rva == 0 {
        return Ok(ImportTable::default());
    }

    let mut entries = Vec::new();
    let base = layout.rva_to_offset(layout.import_rva)?;
    for i in 0..=MAX_DESCRIPTORS {
        if i == MAX_DESCRIPTORS {
            return Err(PeError::MalformedImportDirectory("unterminated descriptor array"));
        }
        let d = base + i * DESCRIPTOR_SIZE;
        let descriptor = r
            .bytes(d, DESCRIPTOR_SIZE, "import descriptor")
            .map_err(|_| PeError::MalformedImportDirectory("descriptor out of bounds"))?;
        if descriptor.iter().all(|&b| b == 0) {
            break;
        }
        let original_first_thunk = r.u32(d, "oft")?;
        let name_rva = r.u32(d + 12, "name rva")?;
        let first_thunk = r.u32(d + 16, "ft")?;

        let dll_name = r.cstr(layout.rva_to_offset(name_rva)?, "dll name")?;
        // prefer the unbound lookup table, fall back to the IAT
        let thunk_rva = if original_first_thunk != 0 { original_first_thunk } else { first_thunk };
        if thunk_rva == 0 {
            return Err(PeError::MalformedImportDirectory("descriptor has no thunk array"));
        }
        let thunks = layout.rva_to_offset(thunk_rva)?;
        let width = if layout.is_64 { 8 } else { 4 };
        for t in 0..=MAX_THUNKS {
            if t == MAX_THUNKS {
                return Err(PeError::MalformedImportDirectory("unterminated thunk array"));
            }
            let off = thunks + t * width;
            let (value, by_ordinal) = if layout.is_64 {
                let v = r
                    .u64(off, "thunk")
                    .map_err(|_| PeError::MalformedImportDirectory("thunk out of bounds"))?;
                (v & 0x7fff_ffff_ffff_ffff, v & 0x8000_0000_0000_0000 != 0)
            } else {
                let v = r
                    .u32(off, "thunk")
                    .map_err(|_| PeError::MalformedImportDirectory("thunk out of bounds"))?;
                ((v & 0x7fff_ffff) as u64, v & 0x8000_0000 != 0)
            };
            if value == 0 && !by_ordinal {
                break;
            }
            let symbol = if by_ordinal {
                ImportSymbol::Ordinal((value & 0xffff) as u16)
            } else {
                // IMAGE_IMPORT_BY_NAME: u16 hint, then the symbol name
                let name_off = layout.rva_to_offset(value as u32)?;
                ImportSymbol::Name(r.cstr(name_off + 2, "import name")?)
            };
            entries.push(ImportEntry { dll_name: dll_name.clone(), symbol });
        }
    }
    Ok(ImportTable { entries })
}
