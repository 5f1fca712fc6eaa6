use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Program, Region};

pub const GLOBAL_BASE: u32 = 0x1000_0000;
pub const HEAP_BASE: u32 = 0x2000_0000;
pub const STACK_TOP: u32 = 0x7000_0000;
pub const SHADOW_BASE: u32 = 0x4000_0000;

/// A mapped range of the simulated address space, `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub name: &'static str,
    pub lo: u32,
    pub hi: u32,
}

/// Every address a program may touch. Anything else is a hard fault.
pub const WINDOWS: [Window; 3] = [
    Window { name: "global", lo: GLOBAL_BASE, hi: GLOBAL_BASE + 0x10_0000 },
    Window { name: "heap", lo: HEAP_BASE, hi: HEAP_BASE + 0x10_0000 },
    Window { name: "stack", lo: STACK_TOP - 0x10_0000, hi: STACK_TOP },
];

pub fn mapped(addr: u64) -> bool {
    WINDOWS
        .iter()
        .any(|w| addr >= u64::from(w.lo) && addr < u64::from(w.hi))
}

/// Shadow byte recording the state of `addr`; one shadow byte per 8 bytes.
pub fn shadow_addr(addr: u32) -> u32 {
    SHADOW_BASE + (addr >> 3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ByteClass {
    Addressable,
    Redzone(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedZone {
    pub id: u32,
    /// First poisoned byte.
    pub lo: u64,
    /// One past the last poisoned byte.
    pub hi: u64,
}

/// Byte-granular classification of the address space. Bytes outside every
/// zone are addressable; an empty map describes an uninstrumented run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShadowMap {
    zones: BTreeMap<u64, RedZone>,
}

impl ShadowMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map from zones; fails if two zones overlap or one is empty.
    pub fn from_zones(zones: impl IntoIterator<Item = RedZone>) -> Result<Self, String> {
        let mut map = Self::default();
        for z in zones {
            map.insert(z)?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, zone: RedZone) -> Result<(), String> {
        if zone.lo >= zone.hi {
            return Err(format!("redzone {} is empty", zone.id));
        }
        let overlaps_prev = self
            .zones
            .range(..zone.hi)
            .next_back()
            .is_some_and(|(_, z)| z.hi > zone.lo);
        if overlaps_prev {
            return Err(format!("redzone {} overlaps another zone", zone.id));
        }
        self.zones.insert(zone.lo, zone);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn zones(&self) -> impl Iterator<Item = &RedZone> {
        self.zones.values()
    }

    pub fn zone_at(&self, addr: u64) -> Option<&RedZone> {
        self.zones
            .range(..=addr)
            .next_back()
            .map(|(_, z)| z)
            .filter(|z| addr < z.hi)
    }

    pub fn classify(&self, addr: u64) -> ByteClass {
        match self.zone_at(addr) {
            Some(z) => ByteClass::Redzone(z.id),
            None => ByteClass::Addressable,
        }
    }

    pub fn is_redzone(&self, addr: u64) -> bool {
        self.zone_at(addr).is_some()
    }
}

impl Serialize for ShadowMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Out<'a> {
            zones: Vec<&'a RedZone>,
        }
        Out { zones: self.zones.values().collect() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ShadowMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct In {
            zones: Vec<RedZone>,
        }
        let raw = In::deserialize(d)?;
        ShadowMap::from_zones(raw.zones).map_err(serde::de::Error::custom)
    }
}

/// Absolute placement of every declared variable for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// Base address of each variable, indexed like `Program::data_layout`.
    pub addrs: Vec<u32>,
    pub sizes: Vec<u32>,
    pub shadow: ShadowMap,
}

impl Layout {
    /// Variables packed back to back in declaration order.
    pub fn flat(program: &Program) -> Self {
        Self::build(program, 0)
    }

    /// Every variable surrounded by `redzone` poisoned bytes; neighbours share
    /// the zone between them.
    pub fn with_redzones(program: &Program, redzone: u32) -> Self {
        Self::build(program, redzone)
    }

    fn build(program: &Program, redzone: u32) -> Self {
        let n = program.data_layout.len();
        let mut offsets = vec![0u32; n];
        let mut zones_rel: Vec<(Region, u32, u32)> = Vec::new();
        let mut totals: BTreeMap<Region, u32> = BTreeMap::new();
        for region in Region::ALL {
            let mut pos = 0u32;
            let mut any = false;
            for (i, v) in program.data_layout.iter().enumerate() {
                if v.region != region {
                    continue;
                }
                any = true;
                if redzone > 0 {
                    zones_rel.push((region, pos, pos + redzone));
                    pos += redzone;
                }
                offsets[i] = if redzone == 0 { v.offset } else { pos };
                pos = if redzone == 0 { v.offset + v.size } else { pos + v.size };
            }
            if any && redzone > 0 {
                zones_rel.push((region, pos, pos + redzone));
                pos += redzone;
            }
            totals.insert(region, pos);
        }
        let base = |region: Region| -> u32 {
            match region {
                Region::Global => GLOBAL_BASE,
                Region::Heap => HEAP_BASE,
                Region::Stack => STACK_TOP - totals[&Region::Stack],
            }
        };
        let addrs = program
            .data_layout
            .iter()
            .zip(&offsets)
            .map(|(v, off)| base(v.region) + off)
            .collect();
        let sizes = program.data_layout.iter().map(|v| v.size).collect();
        let shadow = ShadowMap::from_zones(zones_rel.iter().enumerate().map(|(id, &(r, lo, hi))| {
            RedZone {
                id: id as u32,
                lo: u64::from(base(r) + lo),
                hi: u64::from(base(r) + hi),
            }
        }))
        .expect("generated zones are disjoint");
        Layout { addrs, sizes, shadow }
    }

    /// Variable whose bytes include `addr`.
    pub fn owner(&self, addr: u64) -> Option<usize> {
        self.addrs
            .iter()
            .zip(&self.sizes)
            .position(|(&a, &s)| addr >= u64::from(a) && addr < u64::from(a) + u64::from(s))
    }

    /// Whether the layout fits inside the mapped windows.
    pub fn fits(&self) -> bool {
        self.addrs.iter().zip(&self.sizes).all(|(&a, &s)| {
            s == 0 || (mapped(u64::from(a)) && mapped(u64::from(a) + u64::from(s) - 1))
        })
    }
}
