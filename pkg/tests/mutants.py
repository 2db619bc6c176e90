"""Deliberately broken kernels for the mutation checks.

Usable from the command line as ``capsim fuzz --kernel mutants:NoDisconnect``
with this directory on ``PYTHONPATH``.
"""
from capsim.kernel import Kernel, Permission


class NoDisconnect(Kernel):
    """Marks revoked subtrees NA but leaves them linked into the forest."""

    def _revoke(self, tops):
        revoked = []
        for top in tops:
            stack = [top]
            while stack:
                node = stack.pop()
                node.perm = Permission.NA
                revoked.append(node.id)
                stack.extend(node.children.values())
        return revoked


class SelfNotAncestor(Kernel):
    """Treats the accessing capability as a conflict with itself."""

    def _conflicts(self, accessor, lo, hi):
        found = super()._conflicts(accessor, lo, hi)
        if accessor.parent and accessor.lo < hi and lo < accessor.hi:
            found.append(accessor)
        return found
