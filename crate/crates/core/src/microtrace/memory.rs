use std::collections::BTreeMap;

pub const PAGE_SIZE: u64 = 4096;

struct Page {
    bytes: Box<[u8; PAGE_SIZE as usize]>,
    init: Box<[bool; PAGE_SIZE as usize]>,
}

impl Page {
    fn new() -> Page {
        Page {
            bytes: Box::new([0; PAGE_SIZE as usize]),
            init: Box::new([false; PAGE_SIZE as usize]),
        }
    }
}

/// The SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Content of a never-written byte at `addr` under `seed`.
///
/// Depends only on `(seed, addr)`, so two programs touching the same
/// uninitialized address observe the same byte regardless of access order.
pub fn uninit_byte(seed: u64, addr: u64) -> u8 {
    (splitmix64(seed ^ splitmix64(addr)) & 0xff) as u8
}

/// Sparse page-granular memory with on-demand mapping.
#[derive(Default)]
pub struct Memory {
    pages: BTreeMap<u64, Page>,
}

impl Clone for Memory {
    fn clone(&self) -> Self {
        let pages = self
            .pages
            .iter()
            .map(|(k, p)| {
                (
                    *k,
                    Page {
                        bytes: p.bytes.clone(),
                        init: p.init.clone(),
                    },
                )
            })
            .collect();
        Memory { pages }
    }
}

impl std::fmt::Debug for Memory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Memory")
            .field("mapped_pages", &self.pages.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl PartialEq for Memory {
    fn eq(&self, other: &Self) -> bool {
        self.pages.keys().eq(other.pages.keys()) && self.initialized_bytes() == other.initialized_bytes()
    }
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    /// Maps every page overlapping `[addr, addr + len)`, wrapping at 2^64.
    pub fn map(&mut self, addr: u64, len: u64) {
        if len == 0 {
            return;
        }
        let last = addr.wrapping_add(len - 1);
        let mut page = addr / PAGE_SIZE;
        let end = last / PAGE_SIZE;
        loop {
            self.pages.entry(page).or_insert_with(Page::new);
            if page == end {
                break;
            }
            page = page.wrapping_add(1) % (u64::MAX / PAGE_SIZE + 1);
        }
    }

    pub fn is_mapped(&self, addr: u64) -> bool {
        self.pages.contains_key(&(addr / PAGE_SIZE))
    }

    pub fn mapped_pages(&self) -> usize {
        self.pages.len()
    }

    fn page_mut(&mut self, addr: u64) -> (&mut Page, usize) {
        let page = self
            .pages
            .get_mut(&(addr / PAGE_SIZE))
            .unwrap_or_else(|| panic!("access to unmapped address {addr:#x}"));
        (page, (addr % PAGE_SIZE) as usize)
    }

    /// Reads 8 little-endian bytes, first filling never-written bytes with
    /// their seeded random content. Maps the range on demand.
    pub fn load_u64(&mut self, addr: u64, seed: u64) -> u64 {
        self.map(addr, 8);
        let mut out = [0u8; 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let a = addr.wrapping_add(k as u64);
            let (page, off) = self.page_mut(a);
            if !page.init[off] {
                page.bytes[off] = uninit_byte(seed, a);
                page.init[off] = true;
            }
            *slot = page.bytes[off];
        }
        u64::from_le_bytes(out)
    }

    pub fn store_u64(&mut self, addr: u64, value: u64) {
        self.map(addr, 8);
        for (k, b) in value.to_le_bytes().into_iter().enumerate() {
            let a = addr.wrapping_add(k as u64);
            let (page, off) = self.page_mut(a);
            page.bytes[off] = b;
            page.init[off] = true;
        }
    }

    /// Every byte that has been written or materialized by a read.
    pub fn initialized_bytes(&self) -> BTreeMap<u64, u8> {
        let mut out = BTreeMap::new();
        for (pno, page) in &self.pages {
            for off in 0..PAGE_SIZE as usize {
                if page.init[off] {
                    out.insert(pno * PAGE_SIZE + off as u64, page.bytes[off]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_after_write() {
        let mut m = Memory::new();
        m.store_u64(0x2000, 5);
        assert_eq!(m.load_u64(0x2000, 99), 5);
    }

    #[test]
    fn uninitialized_reads_are_seeded_and_stable() {
        let mut a = Memory::new();
        let mut b = Memory::new();
        let x = a.load_u64(0x5000, 7);
        assert_eq!(a.load_u64(0x5000, 7), x);
        assert_eq!(b.load_u64(0x5000, 7), x);
        // Overlapping unaligned read sees the same bytes.
        let y = b.load_u64(0x5004, 7);
        assert_eq!(y & 0xffff_ffff, x >> 32);
        let mut c = Memory::new();
        assert_ne!(c.load_u64(0x5000, 8), x);
    }

    #[test]
    fn straddles_pages_and_wraps() {
        let mut m = Memory::new();
        m.store_u64(PAGE_SIZE - 4, u64::MAX);
        assert_eq!(m.mapped_pages(), 2);
        m.store_u64(u64::MAX - 3, 0x0102_0304_0506_0708);
        assert_eq!(m.load_u64(u64::MAX - 3, 0), 0x0102_0304_0506_0708);
        assert!(m.is_mapped(0) && m.is_mapped(u64::MAX));
    }

    #[test]
    fn partial_initialization() {
        let mut m = Memory::new();
        m.store_u64(0x3000, 0);
        let v = m.load_u64(0x3004, 3);
        assert_eq!(v & 0xffff_ffff, 0);
        let hi = (v >> 32) as u32;
        let expect = u32::from_le_bytes([
            uninit_byte(3, 0x3008),
            uninit_byte(3, 0x3009),
            uninit_byte(3, 0x300a),
            uninit_byte(3, 0x300b),
        ]);
        assert_eq!(hi, expect);
    }
}
