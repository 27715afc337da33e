//! Minimal synthetic PE images.
//!
//! Builds just enough of a 32- or 64-bit PE file to carry a classic import
//! directory: DOS header, COFF and optional headers, one section holding
//! the descriptor/thunk/name data. Used by the test fixtures and by the
//! CLI demos; the images are not runnable programs.

use super::ImportSymbol;

/// Target machine of the synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeMachine {
    X86,
    X64,
}

const FILE_ALIGN: usize = 0x200;
const SECTION_RVA: u32 = 0x1000;

/// Builder for synthetic PE images with a configurable import table.
#[derive(Debug, Clone)]
pub struct PeBuilder {
    machine: PeMachine,
    imports: Vec<(String, Vec<ImportSymbol>)>,
}

impl PeBuilder {
    pub fn new(machine: PeMachine) -> Self {
        Self { machine, imports: Vec::new() }
    }

    /// Add one descriptor importing `symbols` from `dll`.
    pub fn import_symbols(mut self, dll: &str, symbols: Vec<ImportSymbol>) -> Self {
        self.imports.push((dll.to_string(), symbols));
        self
    }

    pub fn import_names(self, dll: &str, names: &[&str]) -> Self {
        let symbols = names.iter().map(|n| ImportSymbol::Name(n.to_string())).collect();
        self.import_symbols(dll, symbols)
    }

    pub fn import_ordinals(self, dll: &str, ordinals: &[u16]) -> Self {
        let symbols = ordinals.iter().map(|&n| ImportSymbol::Ordinal(n)).collect();
        self.import_symbols(dll, symbols)
    }

    /// Serialize the image.
    pub fn build(&self) -> Vec<u8> {
        let is_64 = self.machine == PeMachine::X64;
        let ptr_w = if is_64 { 8usize } else { 4 };

        // ---- lay out the .idata payload, offsets relative to SECTION_RVA ----
        let n_dlls = self.imports.len();
        let desc_bytes = (n_dlls + 1) * 20;
        let mut oft_offsets = Vec::with_capacity(n_dlls);
        let mut cursor = desc_bytes;
        for (_, symbols) in &self.imports {
            oft_offsets.push(cursor);
            cursor += (symbols.len() + 1) * ptr_w;
        }
        let mut ft_offsets = Vec::with_capacity(n_dlls);
        for (_, symbols) in &self.imports {
            ft_offsets.push(cursor);
            cursor += (symbols.len() + 1) * ptr_w;
        }
        // hint/name blobs
        let mut name_blob_offsets: Vec<Vec<Option<usize>>> = Vec::with_capacity(n_dlls);
        for (_, symbols) in &self.imports {
            let mut per = Vec::with_capacity(symbols.len());
            for symbol in symbols {
                match symbol {
                    ImportSymbol::Name(name) => {
                        per.push(Some(cursor));
                        cursor += 2 + name.len() + 1;
                    }
                    ImportSymbol::Ordinal(_) => per.push(None),
                }
            }
            name_blob_offsets.push(per);
        }
        let mut dll_name_offsets = Vec::with_capacity(n_dlls);
        for (dll, _) in &self.imports {
            dll_name_offsets.push(cursor);
            cursor += dll.len() + 1;
        }
        let idata_len = if n_dlls == 0 { 4 } else { cursor };

        let mut idata = vec![0u8; idata_len];
        let rva = |off: usize| SECTION_RVA + off as u32;
        if n_dlls > 0 {
            for (i, (_, symbols)) in self.imports.iter().enumerate() {
                let d = i * 20;
                idata[d..d + 4].copy_from_slice(&rva(oft_offsets[i]).to_le_bytes());
                idata[d + 12..d + 16].copy_from_slice(&rva(dll_name_offsets[i]).to_le_bytes());
                idata[d + 16..d + 20].copy_from_slice(&rva(ft_offsets[i]).to_le_bytes());
                for (t, symbol) in symbols.iter().enumerate() {
                    let value: u64 = match symbol {
                        ImportSymbol::Name(_) => {
                            rva(name_blob_offsets[i][t].unwrap()) as u64
                        }
                        ImportSymbol::Ordinal(n) => {
                            if is_64 {
                                0x8000_0000_0000_0000 | *n as u64
                            } else {
                                0x8000_0000 | *n as u64
                            }
                        }
                    };
                    for base in [oft_offsets[i], ft_offsets[i]] {
                        let at = base + t * ptr_w;
                        idata[at..at + ptr_w].copy_from_slice(&value.to_le_bytes()[..ptr_w]);
                    }
                }
                for (t, symbol) in symbols.iter().enumerate() {
                    if let ImportSymbol::Name(name) = symbol {
                        let at = name_blob_offsets[i][t].unwrap();
                        // hint stays zero; name follows
                        idata[at + 2..at + 2 + name.len()].copy_from_slice(name.as_bytes());
                    }
                }
            }
            for (i, (dll, _)) in self.imports.iter().enumerate() {
                let at = dll_name_offsets[i];
                idata[at..at + dll.len()].copy_from_slice(dll.as_bytes());
            }
        }

        // ---- headers ----
        let opt_size: usize = if is_64 { 240 } else { 224 };
        let e_lfanew = 0x40usize;
        let headers_len = e_lfanew + 4 + 20 + opt_size + 40;
        assert!(headers_len <= FILE_ALIGN);

        let raw_size = idata_len.div_ceil(FILE_ALIGN) * FILE_ALIGN;
        let mut image = vec![0u8; FILE_ALIGN + raw_size];
        image[0] = b'M';
        image[1] = b'Z';
        image[0x3c..0x40].copy_from_slice(&(e_lfanew as u32).to_le_bytes());
        image[e_lfanew..e_lfanew + 4].copy_from_slice(b"PE\0\0");

        let coff = e_lfanew + 4;
        let machine: u16 = if is_64 { 0x8664 } else { 0x14c };
        let characteristics: u16 = if is_64 { 0x0022 } else { 0x0102 };
        image[coff..coff + 2].copy_from_slice(&machine.to_le_bytes());
        image[coff + 2..coff + 4].copy_from_slice(&1u16.to_le_bytes()); // sections
        image[coff + 16..coff + 18].copy_from_slice(&(opt_size as u16).to_le_bytes());
        image[coff + 18..coff + 20].copy_from_slice(&characteristics.to_le_bytes());

        let opt = coff + 20;
        let magic: u16 = if is_64 { 0x20b } else { 0x10b };
        image[opt..opt + 2].copy_from_slice(&magic.to_le_bytes());
        image[opt + 16..opt + 20].copy_from_slice(&SECTION_RVA.to_le_bytes()); // entry point
        image[opt + 20..opt + 24].copy_from_slice(&SECTION_RVA.to_le_bytes()); // base of code
        let (img_base_off, dir_count_off, dirs_off) = if is_64 { (24, 108, 112) } else { (28, 92, 96) };
        if is_64 {
            image[opt + img_base_off..opt + img_base_off + 8]
                .copy_from_slice(&0x1_4000_0000u64.to_le_bytes());
        } else {
            image[opt + img_base_off..opt + img_base_off + 4]
                .copy_from_slice(&0x0040_0000u32.to_le_bytes());
        }
        // alignment and size fields share offsets across PE32 and PE32+
        image[opt + 32..opt + 36].copy_from_slice(&0x1000u32.to_le_bytes());
        image[opt + 36..opt + 40].copy_from_slice(&(FILE_ALIGN as u32).to_le_bytes());
        let size_of_image: u32 = SECTION_RVA + (idata_len as u32).div_ceil(0x1000) * 0x1000;
        image[opt + 56..opt + 60].copy_from_slice(&size_of_image.to_le_bytes());
        image[opt + 60..opt + 64].copy_from_slice(&(FILE_ALIGN as u32).to_le_bytes());
        image[opt + 68..opt + 70].copy_from_slice(&3u16.to_le_bytes());
        image[opt + dir_count_off..opt + dir_count_off + 4].copy_from_slice(&16u32.to_le_bytes());
        if n_dlls > 0 {
            let import_dir = opt + dirs_off + 8;
            image[import_dir..import_dir + 4].copy_from_slice(&SECTION_RVA.to_le_bytes());
            image[import_dir + 4..import_dir + 8]
                .copy_from_slice(&(desc_bytes as u32).to_le_bytes());
        }

        let sect = opt + opt_size;
        let name: &[u8] = if n_dlls > 0 { b".idata\0\0" } else { b".data\0\0\0" };
        image[sect..sect + 8].copy_from_slice(name);
        image[sect + 8..sect + 12].copy_from_slice(&(idata_len as u32).to_le_bytes());
        image[sect + 12..sect + 16].copy_from_slice(&SECTION_RVA.to_le_bytes());
        image[sect + 16..sect + 20].copy_from_slice(&(raw_size as u32).to_le_bytes());
        image[sect + 20..sect + 24].copy_from_slice(&(FILE_ALIGN as u32).to_le_bytes());
        image[sect + 36..sect + 40].copy_from_slice(&0xc000_0040u32.to_le_bytes());

        image[FILE_ALIGN..FILE_ALIGN + idata_len].copy_from_slice(&idata);
        image
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_have_sane_headers() {
        for machine in [PeMachine::X86, PeMachine::X64] {
            let pe = PeBuilder::new(machine)
                .import_names("KERNEL32.DLL", &["ExitProcess"])
                .build();
            assert_eq!(&pe[0..2], b"MZ");
            let e_lfanew = u32::from_le_bytes(pe[0x3c..0x40].try_into().unwrap()) as usize;
            assert_eq!(&pe[e_lfanew..e_lfanew + 4], b"PE\0\0");
            assert_eq!(pe.len() % FILE_ALIGN, 0);
        }
    }
}
