//! Hand-written programs used by tests, benches and the CLI docs.

/// The classic off-by-one reader:
///
/// ```c
/// int age, i, total = 0, ages[0x20];
/// for (i = 0; i <= 0x20; i++) {
///     age = receive();
///     if (age == -1) break;
///     ages[i] = age;      // overflows into `total` when i == 0x20
///     total += ages[i];
/// }
/// ```
///
/// transliterated one x86 instruction per line.
pub const AGES_LOOP: &str = "\
; int age, i, total = 0, ages[0x20];
.var ages  stack 128
.var total stack 4
.var i     stack 4
.var age   stack 4
    sub sp, 0x94
    store [i], 0
    store [total], 0
    jmp target2
target1:
    input [age], 4
    load r1, [age]
    cmp [age], 0xffffffff
    je target3
    load r0, [i]
    store [ages + r0*4], r1     ; overflow when i == 0x20
    add [total], r1
    add [i], 1
target2:
    cmp [i], 0x20
    jle target1
target3:
";

/// Instruction index of the store in [`AGES_LOOP`].
pub const AGES_LOOP_STORE: usize = 9;

/// Two independent off-by-one loops, one on the stack and one in globals.
pub const TWO_OVERFLOWS: &str = "\
.var a  stack 16
.var va stack 4
.var b  global 16
.var vb global 4
    store [va], 7
    store [vb], 9
    mov r0, 0
loop_a:
    store [a + r0*4], r0
    add r0, 1
    cmp r0, 4
    jle loop_a
    mov r1, 0
loop_b:
    store [b + r1*4], 3
    add r1, 1
    cmp r1, 4
    jle loop_b
    halt
";

/// Instruction indices of the two overflowing stores in [`TWO_OVERFLOWS`].
pub const TWO_OVERFLOWS_STORES: [usize; 2] = [3, 8];

/// Encodes 32-bit integers as little-endian input bytes.
pub fn int_input(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}
