"""
tree: the key tree of a logical key hierarchy.

A `KeyTree` is a rooted tree of k-nodes. Every k-node holds one key; the leaves are the individual-key
k-nodes of the users (the u-node of a user is represented by the ``user`` attribute of its leaf). A user holds
exactly the keys on the path from its leaf to the root, the root key being the group key.

The typical way to use this module is

    >>> import numpy as np
    >>> from gcsim.crypto import gen_key
    >>> from gcsim.tree import KeyTree
    >>> rng = np.random.default_rng(0)
    >>> users = ['u%d' % i for i in range(1, 9)]
    >>> tree = KeyTree.build(users, {u: gen_key(rng) for u in users}, rng, degree=3)
    >>> print(tree.render())

which prints the tree of a group of eight users with three keys k_123, k_456, k_78 below the group key.

Node ids are assigned in creation order and never reused within a run.
"""

import logging
from collections import namedtuple

from anytree import LevelOrderIter, NodeMixin, PreOrderIter, RenderTree

from .crypto import DEFAULT_KAPPA, PrfLabel, PrfMeter, SecretKey, VersionedKeyId, gen_key, secure_erase
from .utils import ceil_log, natural_key

log = logging.getLogger(__name__)

#: tree degree used when none is configured (the k-nodes k_123 and k_456 of the eight-user example have 3 children)
DEFAULT_DEGREE = 3


class TreeError(ValueError):
    pass


class UnknownUser(TreeError):
    pass


class UnknownNode(TreeError):
    pass


class DegreeExceeded(TreeError):
    pass


#: result of KeyTree.detach
Detached = namedtuple('Detached', ['removed', 'leaving_point', 'retired'])


class KNode(NodeMixin):
    """A k-node: one key, plus the owning user when the node is an individual-key leaf."""

    def __init__(self, node_id: int, key: SecretKey = None, key_id: VersionedKeyId = None, user: str = None,
                 parent=None, children=None):
        super().__init__()
        self.node_id = node_id
        self.key = key
        self.key_id = key_id
        self.user = user
        self.parent = parent
        if children:
            self.children = children

    @property
    def is_user_leaf(self) -> bool:
        return self.user is not None

    @property
    def label(self) -> str:
        name = self.user if self.is_user_leaf else 'k%d' % self.node_id
        return '%s (%s)' % (name, self.key_id)

    def __repr__(self):
        return 'KNode(%s)' % self.label


class KeyTree:
    """
    Key tree of degree at most `degree_limit`.

    Attributes
    ----------
    nodes : dict
        node id -> KNode, for every k-node currently in the tree
    leaves : dict
        user -> individual-key KNode
    root : KNode
    degree_limit : int
    ledger : dict
        every key version ever held by a node of this tree, as VersionedKeyId -> key octets. Debugging aid used
        to check that replaced keys do not survive anywhere.
    """

    def __init__(self, degree_limit: int = DEFAULT_DEGREE):
        if degree_limit < 2:
            raise TreeError('tree degree must be at least 2, got %r' % degree_limit)
        self.degree_limit = degree_limit
        self.nodes = dict()
        self.leaves = dict()
        self.root = None
        self.ledger = dict()
        self._last_id = 0

    @classmethod
    def build(cls, users, individual_keys, rng, degree: int = DEFAULT_DEGREE, kappa: int = DEFAULT_KAPPA):
        """
        Build a balanced tree over `users`.

        Leaves are grouped left to right, level by level, into ceil(len/degree) groups of sizes as even as
        possible (larger groups first); every group gets a fresh key, and a group of one is carried up as is. A single
        user gets a root above its leaf.

        Parameters
        ----------
        users : list of str
            distinct user tokens, in leaf order
        individual_keys : dict
            user -> SecretKey, the individual keys k_u; the tree stores them as given
        rng : numpy.random.Generator
            source of the fresh inner-node keys
        degree : int, optional
        kappa : int, optional

        Returns
        -------
        KeyTree
        """
        tree = cls(degree)
        if not users:
            raise TreeError('cannot build a key tree without users')

        level = []
        for u in users:
            if u in tree.leaves:
                raise TreeError('duplicate user %s' % u)
            level.append(tree._new_node(individual_keys[u], user=u))

        tree.root = tree._stack(level, lambda children: tree._new_node(gen_key(rng, kappa), children=children))
        log.debug('built key tree for %d users, height %d', len(users), tree.height)
        return tree

    def _stack(self, level, make):
        """Group `level` bottom up into k-nodes made by `make(children)`; returns the root."""
        if len(level) == 1:
            return make(level)
        while len(level) > 1:
            groups = -(-len(level) // self.degree_limit)
            base, extra = divmod(len(level), groups)
            sizes = [base + 1] * extra + [base] * (groups - extra)
            upper, start = [], 0
            for size in sizes:
                if size == 1:
                    upper.append(level[start])     # no single-child k-nodes
                else:
                    upper.append(make(level[start:start + size]))
                start += size
            level = upper
        return level[0]

    def new_node_id(self) -> int:
        self._last_id += 1
        return self._last_id

    def _new_node(self, key, user=None, children=None, node_id=None):
        node_id = self.new_node_id() if node_id is None else node_id
        key_id = VersionedKeyId(node_id) if key is not None else None
        node = KNode(node_id, key, key_id, user=user, children=children)
        self.nodes[node_id] = node
        if user is not None:
            self.leaves[user] = node
        if key is not None:
            self.ledger[key_id] = key.material
        return node

    # ------------------------------------------------------------------ lookups

    def node(self, node_id: int) -> KNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode('no k-node %r in the tree' % node_id) from None

    def leaf(self, u: str) -> KNode:
        try:
            return self.leaves[u]
        except KeyError:
            raise UnknownUser('user %r is not in the tree' % u) from None

    @property
    def height(self) -> int:
        return self.root.height if self.root is not None else 0

    @property
    def users(self):
        return sorted(self.leaves, key=natural_key)

    def keyset(self, u: str):
        """Key ids held by `u`, from its individual key up to the group key."""
        return [node.key_id for node in reversed(self.leaf(u).path)]

    def keyset_nodes(self, u: str):
        return list(reversed(self.leaf(u).path))

    def userset(self, node_id: int) -> set:
        """Users below k-node `node_id`."""
        node = self.node(node_id)
        return {n.user for n in PreOrderIter(node) if n.is_user_leaf}

    def path_to_root(self, node_id: int):
        """Node ids from `node_id` (inclusive) up to the root."""
        return [n.node_id for n in reversed(self.node(node_id).path)]

    def key_index(self) -> dict:
        """Current key id -> KNode."""
        return {node.key_id: node for node in self.nodes.values() if node.key_id is not None}

    # ---------------------------------------------------------------- key edits

    def install(self, node_id: int, key: SecretKey) -> VersionedKeyId:
        """Replace the key of a node with a fresh one: next generation, epoch 0. The old key is erased."""
        node = self.node(node_id)
        generation = node.key_id.generation + 1 if node.key_id is not None else 0
        if node.key is not None:
            secure_erase(node.key)
        node.key = key
        node.key_id = VersionedKeyId(node_id, generation, 0)
        self.ledger[node.key_id] = key.material
        return node.key_id

    def evolve(self, node_id: int, meter: PrfMeter) -> VersionedKeyId:
        """k <- f_k(1) at a node; the pre-image is erased."""
        node = self.node(node_id)
        new_key = meter(node.key, PrfLabel.NEXT)
        secure_erase(node.key)
        node.key = new_key
        node.key_id = node.key_id.evolved()
        self.ledger[node.key_id] = new_key.material
        return node.key_id

    # -------------------------------------------------------- structural edits

    def find_joining_point(self) -> int:
        """
        Where the next user attaches.

        The shallowest k-node with fewer than `degree_limit` children (leftmost among equals). When every inner
        node is full, the shallowest leftmost individual-key leaf is returned; `attach` then splits it.
        """
        first_leaf = None
        for node in LevelOrderIter(self.root):
            if not node.is_user_leaf and len(node.children) < self.degree_limit:
                return node.node_id
            if node.is_user_leaf and first_leaf is None:
                first_leaf = node
        return first_leaf.node_id

    def attach(self, joining_point: int, u: str, k_u: SecretKey, node_id: int = None) -> int:
        """
        Add `u` with individual key `k_u` below `joining_point`.

        If the joining point is an individual-key leaf v, a new k-node w without key takes v's place and gets v and
        the new leaf as children; the caller installs w's key.

        Parameters
        ----------
        joining_point : int
        u : str
        k_u : SecretKey
        node_id : int, optional
            id reserved for the new leaf with `new_node_id`, so the user could learn its key id in advance

        Returns
        -------
        int
            id of the new leaf
        """
        if u in self.leaves:
            raise TreeError('user %r is already in the tree' % u)
        point = self.node(joining_point)
        if point.is_user_leaf:
            parent = point.parent
            siblings = list(parent.children)
            w = self._new_node(None)
            siblings[siblings.index(point)] = w
            parent.children = siblings
            point.parent = w
            log.debug('split leaf %s under new k-node %d', point.user, w.node_id)
            point = w
        elif len(point.children) >= self.degree_limit:
            raise DegreeExceeded('k-node %d already has %d children' % (point.node_id, len(point.children)))
        if node_id in self.nodes:
            raise TreeError('k-node id %d is in use' % node_id)
        leaf = self._new_node(k_u, user=u, node_id=node_id)
        leaf.parent = point
        return leaf.node_id

    def detach(self, u: str) -> Detached:
        """
        Remove user `u` and its individual key.

        A non-root parent left with a single child is spliced out and the child takes its place. A root left with a
        single inner child absorbs that child's children. Removed k-nodes are reported in `retired` and their keys
        erased.

        Returns
        -------
        Detached
            (removed leaf id, id of the lowest k-node whose key must change, retired node ids)
        """
        leaf = self.leaf(u)
        parent = leaf.parent
        leaf.parent = None
        self._drop(leaf)

        retired = []
        point = parent
        if parent is not self.root and len(parent.children) == 1:
            grand = parent.parent
            siblings = list(grand.children)
            siblings[siblings.index(parent)] = parent.children[0]
            grand.children = siblings
            parent.parent = None
            retired.append(self._drop(parent))
            point = grand
        elif parent is self.root and len(parent.children) == 1 and not parent.children[0].is_user_leaf:
            only = parent.children[0]
            parent.children = list(only.children)
            only.parent = None
            retired.append(self._drop(only))

        if retired:
            log.debug('spliced out k-nodes %s', retired)
        return Detached(leaf.node_id, point.node_id, retired)

    @property
    def height_bound(self) -> int:
        """ceil(log_d n) + 1 for the n users in the tree."""
        return ceil_log(len(self.leaves), self.degree_limit) + 1

    def rebalance(self):
        """
        Replace every inner k-node by a balanced stack over the current leaves, in leaf order, as `build` does.

        Individual-key leaves stay as they are. The new k-nodes have no key; the caller installs them.

        Returns
        -------
        (list of int, list of int)
            ids of the new k-nodes from the root down, and ids of the retired ones
        """
        leaves = [n for n in PreOrderIter(self.root) if n.is_user_leaf]
        old = [n for n in PreOrderIter(self.root) if not n.is_user_leaf]
        for node in leaves + old:
            node.parent = None
        retired = [self._drop(node) for node in old]
        self.root = self._stack(leaves, lambda children: self._new_node(None, children=children))
        fresh = [n.node_id for n in LevelOrderIter(self.root) if not n.is_user_leaf]
        log.debug('rebalanced %d users: k-nodes %s replace %s, height %d', len(leaves), fresh, retired, self.height)
        return fresh, retired

    def _drop(self, node: KNode) -> int:
        del self.nodes[node.node_id]
        if node.is_user_leaf:
            del self.leaves[node.user]
        if node.key is not None:
            secure_erase(node.key)
        return node.node_id

    # ------------------------------------------------------------------ output

    def dump_lines(self):
        """One canonical line per k-node, preorder."""
        lines = []
        for node in PreOrderIter(self.root):
            users = ','.join(sorted(self.userset(node.node_id), key=natural_key))
            parent = node.parent.node_id if node.parent is not None else '-'
            lines.append('node=%d epoch=%d parent=%s users=%s keyfp=%s'
                         % (node.node_id, node.key_id.epoch, parent, users, node.key.fingerprint()))
        return lines

    def render(self) -> str:
        return RenderTree(self.root).by_attr('label')

    def check(self):
        """List of well-formedness problems; empty when the tree is sound."""
        problems = []
        if self.root is None:
            return ['tree has no root']
        if self.root.parent is not None:
            problems.append('root k-node %d has a parent' % self.root.node_id)
        reachable = {n.node_id: n for n in PreOrderIter(self.root)}
        if set(reachable) != set(self.nodes):
            problems.append('node table out of sync with tree: %s' % sorted(set(reachable) ^ set(self.nodes)))
        for node in reachable.values():
            if node.is_user_leaf:
                if node.children:
                    problems.append('leaf of %s has children' % node.user)
                if self.leaves.get(node.user) is not node:
                    problems.append('leaf of %s not registered' % node.user)
            else:
                if len(node.children) > self.degree_limit:
                    problems.append('k-node %d has %d children' % (node.node_id, len(node.children)))
                if node is not self.root and len(node.children) < 2:
                    problems.append('inner k-node %d has %d children' % (node.node_id, len(node.children)))
            if node.key is None or node.key.erased:
                problems.append('k-node %d holds no usable key' % node.node_id)
        for u, node in self.leaves.items():
            if node.node_id not in reachable:
                problems.append('user %s registered but not in the tree' % u)
        return problems
