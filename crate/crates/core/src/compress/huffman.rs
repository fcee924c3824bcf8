//! Canonical Huffman coding over a dense symbol alphabet `0..alphabet`.
//!
//! The table is transmitted as one code length per symbol (0 = unused).
//! Codes are assigned canonically by (length, symbol) and written MSB-first;
//! the final byte is zero-padded.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::wire::{Reader, Truncated, Writer};

pub const MAX_CODE_LEN: u8 = 30;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HuffmanError {
    #[error("cannot encode an empty stream")]
    Empty,
    #[error("symbol {symbol} outside alphabet of {alphabet}")]
    UnknownSymbol { symbol: u32, alphabet: usize },
    #[error("invalid code-length table: {0}")]
    BadTable(String),
    #[error("corrupt stream at bit {bit_offset}")]
    Corrupt { bit_offset: u64 },
    #[error(transparent)]
    Truncated(#[from] Truncated),
}

/// Canonical code description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeTable {
    lengths: Vec<u8>,
}

/// An encoded stream plus the table needed to decode it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub table: CodeTable,
    pub symbols: u64,
    pub bits: u64,
    pub bytes: Vec<u8>,
}

impl CodeTable {
    /// Optimal code lengths for the given frequencies, limited to
    /// [`MAX_CODE_LEN`] by flattening the distribution when needed.
    pub fn from_frequencies(freq: &[u64]) -> Result<Self, HuffmanError> {
        let used: Vec<usize> = (0..freq.len()).filter(|&s| freq[s] > 0).collect();
        if used.is_empty() {
            return Err(HuffmanError::Empty);
        }
        let mut lengths = vec![0u8; freq.len()];
        if used.len() == 1 {
            lengths[used[0]] = 1;
            return Ok(Self { lengths });
        }
        let mut f: Vec<u64> = freq.to_vec();
        loop {
            let depths = tree_depths(&f, &used);
            if depths.iter().all(|&(_, d)| d <= MAX_CODE_LEN as usize) {
                for (s, d) in depths {
                    lengths[s] = d as u8;
                }
                return Ok(Self { lengths });
            }
            for &s in &used {
                f[s] = f[s].div_ceil(2);
            }
        }
    }

    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self, HuffmanError> {
        if lengths.iter().any(|&l| l > MAX_CODE_LEN) {
            return Err(HuffmanError::BadTable(format!("code length above {MAX_CODE_LEN}")));
        }
        let used = lengths.iter().filter(|&&l| l > 0).count();
        if used == 0 {
            return Err(HuffmanError::BadTable("no symbols".into()));
        }
        // Kraft inequality in units of 2^-MAX
        let kraft: u64 = lengths.iter().filter(|&&l| l > 0).map(|&l| 1u64 << (MAX_CODE_LEN - l)).sum();
        if kraft > 1u64 << MAX_CODE_LEN {
            return Err(HuffmanError::BadTable("over-subscribed code".into()));
        }
        Ok(Self { lengths })
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn alphabet(&self) -> usize {
        self.lengths.len()
    }

    /// Canonical codes, indexed by symbol.
    fn codes(&self) -> Vec<u32> {
        let mut order: Vec<usize> = (0..self.lengths.len()).filter(|&s| self.lengths[s] > 0).collect();
        order.sort_by_key(|&s| (self.lengths[s], s));
        let mut codes = vec![0u32; self.lengths.len()];
        let mut code = 0u32;
        let mut prev_len = self.lengths[order[0]];
        for (i, &s) in order.iter().enumerate() {
            let len = self.lengths[s];
            if i > 0 {
                code = (code + 1) << (len - prev_len);
            }
            codes[s] = code;
            prev_len = len;
        }
        codes
    }

    pub fn write(&self, w: &mut Writer) {
        w.u32(self.lengths.len() as u32).bytes(&self.lengths);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, HuffmanError> {
        let n = r.u32()? as usize;
        Self::from_lengths(r.take(n)?.to_vec())
    }

    /// Serialized size of the table in bytes.
    pub fn overhead(&self) -> usize {
        4 + self.lengths.len()
    }
}

/// Depth of every used symbol in a Huffman tree built with deterministic
/// tie-breaking (weight, then creation order).
fn tree_depths(freq: &[u64], used: &[usize]) -> Vec<(usize, usize)> {
    // node: (children or leaf symbol)
    let mut children: Vec<Option<(usize, usize)>> = Vec::new();
    let mut leaf_sym: Vec<usize> = Vec::new();
    let mut heap = BinaryHeap::new();
    for &s in used {
        let id = children.len();
        children.push(None);
        leaf_sym.push(s);
        heap.push(Reverse((freq[s], id)));
    }
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        let id = children.len();
        children.push(Some((a, b)));
        leaf_sym.push(usize::MAX);
        heap.push(Reverse((wa + wb, id)));
    }
    let root = heap.pop().unwrap().0 .1;
    let mut out = Vec::with_capacity(used.len());
    let mut stack = vec![(root, 0usize)];
    while let Some((node, depth)) = stack.pop() {
        match children[node] {
            Some((a, b)) => {
                stack.push((a, depth + 1));
                stack.push((b, depth + 1));
            }
            None => out.push((leaf_sym[node], depth)),
        }
    }
    out
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    fill: u32,
    bits: u64,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), acc: 0, fill: 0, bits: 0 }
    }

    fn put(&mut self, code: u32, len: u8) {
        self.acc = (self.acc << len) | code as u64;
        self.fill += len as u32;
        self.bits += len as u64;
        while self.fill >= 8 {
            self.fill -= 8;
            self.bytes.push((self.acc >> self.fill) as u8);
        }
        self.acc &= (1u64 << self.fill) - 1;
    }

    fn finish(mut self) -> (Vec<u8>, u64) {
        if self.fill > 0 {
            self.bytes.push((self.acc << (8 - self.fill)) as u8);
        }
        (self.bytes, self.bits)
    }
}

/// Encode with a table built from the stream's own frequencies.
pub fn encode(symbols: &[u32], alphabet: usize) -> Result<Encoded, HuffmanError> {
    if symbols.is_empty() {
        return Err(HuffmanError::Empty);
    }
    let mut freq = vec![0u64; alphabet];
    for &s in symbols {
        *freq.get_mut(s as usize).ok_or(HuffmanError::UnknownSymbol { symbol: s, alphabet })? += 1;
    }
    let table = CodeTable::from_frequencies(&freq)?;
    encode_with(symbols, table)
}

pub fn encode_with(symbols: &[u32], table: CodeTable) -> Result<Encoded, HuffmanError> {
    let codes = table.codes();
    let mut bw = BitWriter::new();
    for &s in symbols {
        let len = *table
            .lengths
            .get(s as usize)
            .filter(|&&l| l > 0)
            .ok_or(HuffmanError::UnknownSymbol { symbol: s, alphabet: table.alphabet() })?;
        bw.put(codes[s as usize], len);
    }
    let (bytes, bits) = bw.finish();
    Ok(Encoded { table, symbols: symbols.len() as u64, bits, bytes })
}

/// Decode `count` symbols from an MSB-first bit stream.
pub fn decode(bytes: &[u8], count: u64, table: &CodeTable) -> Result<Vec<u32>, HuffmanError> {
    let max_len = *table.lengths.iter().max().unwrap_or(&0) as usize;
    // per length: number of codes, first code, offset into the sorted symbol list
    let mut count_at = vec![0u32; max_len + 1];
    for &l in &table.lengths {
        if l > 0 {
            count_at[l as usize] += 1;
        }
    }
    let mut sorted: Vec<u32> = (0..table.lengths.len() as u32).filter(|&s| table.lengths[s as usize] > 0).collect();
    sorted.sort_by_key(|&s| (table.lengths[s as usize], s));

    let total_bits = bytes.len() as u64 * 8;
    let mut out = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut pos = 0u64;
    for _ in 0..count {
        let start = pos;
        let (mut code, mut first, mut index) = (0u32, 0u32, 0u32);
        let mut found = None;
        for len in 1..=max_len {
            if pos >= total_bits {
                return Err(HuffmanError::Corrupt { bit_offset: start });
            }
            let bit = (bytes[(pos / 8) as usize] >> (7 - pos % 8)) & 1;
            pos += 1;
            code |= bit as u32;
            let n = count_at[len];
            if code >= first && code < first + n {
                found = Some(sorted[(index + code - first) as usize]);
                break;
            }
            index += n;
            first = (first + n) << 1;
            code <<= 1;
        }
        match found {
            Some(s) => out.push(s),
            None => return Err(HuffmanError::Corrupt { bit_offset: start }),
        }
    }
    // anything past the final partial byte is not padding
    if total_bits - pos >= 8 {
        return Err(HuffmanError::Corrupt { bit_offset: pos });
    }
    Ok(out)
}

impl Encoded {
    pub fn write(&self, w: &mut Writer) {
        self.table.write(w);
        w.u64(self.symbols).u32(self.bytes.len() as u32).bytes(&self.bytes);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, HuffmanError> {
        let table = CodeTable::read(r)?;
        let symbols = r.u64()?;
        let n = r.u32()? as usize;
        let bytes = r.take(n)?.to_vec();
        // exact bit count is not stored; this is an upper bound
        Ok(Self { table, symbols, bits: n as u64 * 8, bytes })
    }

    pub fn decode(&self) -> Result<Vec<u32>, HuffmanError> {
        decode(&self.bytes, self.symbols, &self.table)
    }

    pub fn serialized_len(&self) -> usize {
        self.table.overhead() + 8 + 4 + self.bytes.len()
    }
}
