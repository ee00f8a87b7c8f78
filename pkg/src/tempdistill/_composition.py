# Generated by scripts/gen_composition_table.py; do not edit.
# TABLE[r1][r2] = bitmask over (BEFORE, AFTER, INCLUDES, IS_INCLUDED, SIMULTANEOUS) of relations A->C given r1(A,B), r2(B,C).
TABLE = (
    (1, 31, 1, 9, 1),
    (31, 2, 2, 10, 2),
    (5, 6, 4, 28, 4),
    (1, 2, 31, 8, 8),
    (1, 2, 4, 8, 16),
)
