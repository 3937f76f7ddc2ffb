"""Cross-evaluate every trained level in every environment level.

Rows are the ego's reasoning level (0 is the rule-based driver), columns the
highest level present in the surrounding traffic. Point it at a directory
written by ``levelk curriculum``.

Run: python3 demos/03_cross_level_matrix.py REGISTRY_DIR [episodes]
"""
import sys

from levelk.curriculum import PolicyRegistry
from levelk.evaluation import cross_matrix, matrix_table


def main():
    registry = PolicyRegistry.load(sys.argv[1])
    episodes = int(sys.argv[2]) if len(sys.argv) > 2 else 20
    cells = cross_matrix(registry, registry.max_level, episodes)
    for metric in ("success_rate", "collision_rate", "timeout_rate"):
        table = matrix_table(cells, metric)
        print(f"\n{metric} (rows: ego level, columns: environment level)")
        print("     " + "".join(f"{e:>7d}" for e in range(table.shape[1])))
        for level, row in enumerate(table):
            print(f"{level:>4d} " + "".join(f"{x:7.2f}" for x in row))


if __name__ == "__main__":
    main()
