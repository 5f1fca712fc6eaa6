//! Recovering uninstrumented adjacency from an instrumented address space.

use thiserror::Error;

use crate::isa::ShadowMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toward {
    Lower,
    Higher,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RestoreError {
    #[error("{0:#x} is a redzone byte")]
    NotAddressable(u64),
    #[error("{0:#x} is not a redzone byte")]
    NotRedzone(u64),
    #[error("boundary {b:#x} must be addressable and below {x:#x}")]
    BadBoundary { x: u64, b: u64 },
    #[error("no addressable byte beyond {0:#x}")]
    OutOfSpace(u64),
}

/// Nearest addressable byte on the given side of `addr`, skipping redzones.
pub fn restore_adjacent(addr: u64, toward: Toward, shadow: &ShadowMap) -> Result<u64, RestoreError> {
    if shadow.is_redzone(addr) {
        return Err(RestoreError::NotAddressable(addr));
    }
    step_addressable(addr, toward, shadow)
}

fn step_addressable(addr: u64, toward: Toward, shadow: &ShadowMap) -> Result<u64, RestoreError> {
    let mut a = addr;
    loop {
        a = match toward {
            Toward::Lower => a.checked_sub(1),
            Toward::Higher => a.checked_add(1),
        }
        .ok_or(RestoreError::OutOfSpace(addr))?;
        match shadow.zone_at(a) {
            None => return Ok(a),
            Some(z) => {
                // Jump to the zone edge; the loop then steps past it.
                a = match toward {
                    Toward::Lower => z.lo,
                    Toward::Higher => z.hi - 1,
                };
            }
        }
    }
}

/// Byte an overflowing access to redzone byte `x` would have reached without
/// redzones: the `x - b`-th addressable byte above the boundary `b`.
pub fn map_overflow_byte(x: u64, b: u64, shadow: &ShadowMap) -> Result<u64, RestoreError> {
    if !shadow.is_redzone(x) {
        return Err(RestoreError::NotRedzone(x));
    }
    if b >= x || shadow.is_redzone(b) {
        return Err(RestoreError::BadBoundary { x, b });
    }
    let mut y = b;
    for _ in 0..x - b {
        y = step_addressable(y, Toward::Higher, shadow)?;
    }
    Ok(y)
}

/// Last addressable byte below the redzone byte `x`.
pub(crate) fn boundary_below(x: u64, shadow: &ShadowMap) -> Result<u64, RestoreError> {
    let mut a = x;
    while let Some(z) = shadow.zone_at(a) {
        a = z.lo.checked_sub(1).ok_or(RestoreError::OutOfSpace(x))?;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::RedZone;

    const J: u64 = 0x1000;

    /// red1 | var1 | red2 | buf1 | red3 | var2 | red4
    fn fig4() -> ShadowMap {
        ShadowMap::from_zones([
            RedZone { id: 1, lo: J, hi: J + 4 },
            RedZone { id: 2, lo: J + 8, hi: J + 12 },
            RedZone { id: 3, lo: J + 20, hi: J + 24 },
            RedZone { id: 4, lo: J + 28, hi: J + 32 },
        ])
        .unwrap()
    }

    #[test]
    fn buffer_start_skips_redzone_below() {
        assert_eq!(restore_adjacent(J + 12, Toward::Lower, &fig4()), Ok(J + 7));
    }

    #[test]
    fn interior_byte_needs_no_restoration() {
        assert_eq!(restore_adjacent(J + 13, Toward::Lower, &fig4()), Ok(J + 12));
        assert_eq!(restore_adjacent(J + 13, Toward::Higher, &fig4()), Ok(J + 14));
    }

    #[test]
    fn buffer_end_skips_redzone_above() {
        assert_eq!(restore_adjacent(J + 19, Toward::Higher, &fig4()), Ok(J + 24));
    }

    #[test]
    fn overflow_bytes_map_into_neighbour() {
        let s = fig4();
        assert_eq!(map_overflow_byte(J + 21, J + 19, &s), Ok(J + 25));
        assert_eq!(restore_adjacent(J + 25, Toward::Lower, &s), Ok(J + 24));
        assert_eq!(restore_adjacent(J + 25, Toward::Higher, &s), Ok(J + 26));
        assert_eq!(map_overflow_byte(J + 20, J + 19, &s), Ok(J + 24));
        assert_eq!(boundary_below(J + 21, &s), Ok(J + 19));
    }

    #[test]
    fn first_zone_byte_maps_to_next_addressable() {
        let s = ShadowMap::from_zones([RedZone { id: 0, lo: 100, hi: 101 }]).unwrap();
        assert_eq!(map_overflow_byte(100, 99, &s), Ok(101));
    }

    #[test]
    fn matches_brute_force_scan() {
        let s = fig4();
        let addressable: Vec<u64> = (J - 8..J + 40).filter(|&a| !s.is_redzone(a)).collect();
        for (i, &a) in addressable.iter().enumerate().skip(1).take(addressable.len() - 2) {
            assert_eq!(restore_adjacent(a, Toward::Lower, &s), Ok(addressable[i - 1]));
            assert_eq!(restore_adjacent(a, Toward::Higher, &s), Ok(addressable[i + 1]));
        }
        for x in (J..J + 32).filter(|&x| s.is_redzone(x)) {
            let b = boundary_below(x, &s).unwrap();
            let pos = addressable.iter().position(|&a| a == b).unwrap();
            let d = (x - b) as usize;
            assert_eq!(map_overflow_byte(x, b, &s), Ok(addressable[pos + d]));
        }
    }

    #[test]
    fn precondition_errors() {
        let s = fig4();
        assert_eq!(restore_adjacent(J + 9, Toward::Lower, &s), Err(RestoreError::NotAddressable(J + 9)));
        assert_eq!(map_overflow_byte(J + 13, J + 12, &s), Err(RestoreError::NotRedzone(J + 13)));
        assert!(matches!(map_overflow_byte(J + 21, J + 22, &s), Err(RestoreError::BadBoundary { .. })));
        let empty = ShadowMap::new();
        assert_eq!(restore_adjacent(0, Toward::Lower, &empty), Err(RestoreError::OutOfSpace(0)));
        assert_eq!(restore_adjacent(7, Toward::Higher, &empty), Ok(8));
    }
}
