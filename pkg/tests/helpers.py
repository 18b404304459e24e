"""Shared fixture builders for the test suite."""

import numpy as np

PI = np.pi


def planar_chain(n, length, limits=(-PI, PI), spheres=None):
    """Inline n-revolute planar chain description, tool frame at the tip.

    spheres maps link name -> list of ((x, y, z), radius).
    """
    spheres = spheres or {}
    lines = ["name: chain", "links:"]
    for name in ["base"] + [f"l{i}" for i in range(1, n + 1)] + ["tool"]:
        lines.append(f"  - name: {name}")
        if name in spheres:
            lines.append("    spheres:")
            for c, r in spheres[name]:
                lines.append(f"      - {{center: [{c[0]}, {c[1]}, {c[2]}], radius: {r}}}")
    lines.append("joints:")
    for i in range(1, n + 1):
        parent = "base" if i == 1 else f"l{i-1}"
        lines += [f"  - name: j{i}", "    kind: revolute", f"    parent: {parent}",
                  f"    child: l{i}", "    axis: [0, 0, 1]",
                  f"    limits: [{limits[0]}, {limits[1]}]"]
        if i > 1:
            lines.append(f"    origin: {{xyz: [{length}, 0, 0]}}")
    lines += ["  - name: tip", "    kind: fixed", f"    parent: l{n}", "    child: tool",
              f"    origin: {{xyz: [{length}, 0, 0]}}", "end_effectors: [tool]"]
    return "\n".join(lines)


# 2R chain whose tip sphere hits the base sphere for exactly half of the
# uniform configuration space: |tip|^2 = 0.18 + 0.18 cos(q2) and the radii
# sum to sqrt(0.18), so collision iff cos(q2) < 0.
HALF_REJECTED = planar_chain(2, 0.3, spheres={
    "base": [((0.0, 0.0, 0.0), 0.2121320343559643)],
    "l2": [((0.3, 0.0, 0.0), 0.2121320343559643)],
})
