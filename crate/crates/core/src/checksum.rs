//! FNV-1a 64-bit checksums over byte streams and files.

use std::fs::File;
use std::hash::Hasher;
use std::io::{self, Read, Write};
use std::path::Path;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming FNV-1a 64 hasher.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a64 {
    state: u64,
}

impl Default for Fnv1a64 {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a64 {
    pub const fn new() -> Self {
        Self {
            state: FNV_OFFSET_BASIS,
        }
    }

    #[inline]
    pub fn update(&mut self, bytes: &[u8]) {
        let mut state = self.state;
        for &b in bytes {
            state ^= u64::from(b);
            state = state.wrapping_mul(FNV_PRIME);
        }
        self.state = state;
    }

    pub fn digest(&self) -> u64 {
        self.state
    }
}

impl Hasher for Fnv1a64 {
    fn finish(&self) -> u64 {
        self.state
    }

    fn write(&mut self, bytes: &[u8]) {
        self.update(bytes);
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a64::new();
    h.update(bytes);
    h.digest()
}

/// Lower-case hex rendering used in manifests.
pub fn to_hex(checksum: u64) -> String {
    format!("{checksum:016x}")
}

/// Length and checksum of a whole file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FileDigest {
    pub len: u64,
    pub checksum: u64,
}

pub fn digest_file(path: impl AsRef<Path>) -> io::Result<FileDigest> {
    let mut file = File::open(path)?;
    digest_reader(&mut file)
}

pub fn digest_reader(reader: &mut impl Read) -> io::Result<FileDigest> {
    let mut hasher = Fnv1a64::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut len = 0u64;
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        hasher.update(&buf[..n]);
        len += n as u64;
    }
    Ok(FileDigest {
        len,
        checksum: hasher.digest(),
    })
}

/// A writer adapter that hashes and counts everything passing through it.
pub struct DigestWriter<W> {
    inner: W,
    hasher: Fnv1a64,
    len: u64,
}

impl<W: Write> DigestWriter<W> {
    pub fn new(inner: W) -> Self {
        Self {
            inner,
            hasher: Fnv1a64::new(),
            len: 0,
        }
    }

    pub fn digest(&self) -> FileDigest {
        FileDigest {
            len: self.len,
            checksum: self.hasher.digest(),
        }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> Write for DigestWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.len += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference vectors from the FNV authors' test suite.
    #[test]
    fn known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn streaming_matches_one_shot() {
        let data = b"d1\thello\nd2\tbig world\nd3\t!\n";
        let mut h = Fnv1a64::new();
        for chunk in data.chunks(5) {
            h.update(chunk);
        }
        assert_eq!(h.digest(), fnv1a64(data));

        let mut w = DigestWriter::new(Vec::new());
        w.write_all(data).unwrap();
        assert_eq!(w.digest().checksum, fnv1a64(data));
        assert_eq!(w.digest().len, data.len() as u64);
    }

    #[test]
    fn hex_is_lower_case_and_padded() {
        assert_eq!(to_hex(0xAB), "00000000000000ab");
    }
}
