"""Regenerate src/tempdistill/_composition.py from the endpoint-enumeration oracle."""

from pathlib import Path

from tempdistill.algebra import RELATIONS, composition_table_from_oracle

OUT = Path(__file__).resolve().parents[1] / "src" / "tempdistill" / "_composition.py"


def main():
    table = composition_table_from_oracle()
    names = ", ".join(r.value for r in RELATIONS)
    lines = [
        "# Generated by scripts/gen_composition_table.py; do not edit.",
        f"# TABLE[r1][r2] = bitmask over ({names}) of relations A->C given r1(A,B), r2(B,C).",
        "TABLE = (",
    ]
    lines += [f"    {tuple(row)!r}," for row in table]
    lines.append(")")
    OUT.write_text("\n".join(lines) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
