use super::CodecError;

#[derive(Debug, Default)]
pub(crate) struct BitWriter {
    buf: Vec<u8>,
    acc: u64,
    pending: u8,
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter::default()
    }

    pub fn aligned(&self) -> bool {
        self.pending == 0
    }

    /// Byte offset of the next aligned write.
    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn write_bits(&mut self, value: u64, bits: u8) {
        for i in (0..bits).rev() {
            self.acc = (self.acc << 1) | ((value >> i) & 1);
            self.pending += 1;
            if self.pending == 8 {
                self.buf.push(self.acc as u8);
                self.acc = 0;
                self.pending = 0;
            }
        }
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        debug_assert!(self.aligned());
        self.buf.extend_from_slice(bytes);
    }

    pub fn finish(self) -> Result<Vec<u8>, CodecError> {
        if self.pending != 0 {
            return Err(CodecError::Unencodable {
                path: String::new(),
                reason: format!(
                    "message ends {} bits short of a byte boundary",
                    8 - self.pending
                ),
            });
        }
        Ok(self.buf)
    }
}

/// Bounds-checked big-endian cursor.
#[derive(Debug)]
pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn data(&self) -> &'a [u8] {
        self.data
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::malformed(format!(
                "truncated {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn uint(&mut self, bytes: usize, what: &str) -> Result<u64, CodecError> {
        Ok(self
            .take(bytes, what)?
            .iter()
            .fold(0u64, |acc, b| (acc << 8) | u64::from(*b)))
    }

    pub fn u16(&mut self, what: &str) -> Result<u16, CodecError> {
        Ok(self.uint(2, what)? as u16)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packs_sub_byte_fields() {
        let mut w = BitWriter::new();
        w.write_bits(1, 1);
        w.write_bits(0, 4);
        w.write_bits(0b101, 3);
        w.write_bits(0xabcd, 16);
        assert_eq!(w.finish().unwrap(), vec![0b1000_0101, 0xab, 0xcd]);
    }

    #[test]
    fn unaligned_finish_fails() {
        let mut w = BitWriter::new();
        w.write_bits(1, 3);
        assert!(w.finish().is_err());
    }
}
