"""Session-scoped generation tree over latent states.

Nodes are immutable once created and identified by a content hash of
(parent id, provenance, latent bytes), which makes identical requests
idempotent. Every derivation is a pure function of the session seed and the
recorded provenance, so replaying provenance from the root reconstructs any
latent bit-exactly. Mutations on one session serialize through a lock;
preview reads only touch immutable data plus a bytes cache.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image

from . import blob
from .decoder import MBDecoder, load_decoder
from .diffusion import (
    DiffusionModel,
    LatentState,
    load_checkpoint,
    predict_x0,
    run_sampler,
    tap_features,
)
from .rng import stream
from .variations import SteerConfig, SteeringTarget, make_target, renoise, steer

FORMAT_VERSION = 1


class TreeError(ValueError):
    """Raised on invalid tree operations (bad step, unknown node, overshoot)."""


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _node_id(parent_id: str | None, provenance: dict, latent: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update((parent_id or "").encode())
    h.update(_canonical(provenance).encode())
    h.update(blob.dumps(latent))
    return h.hexdigest()[:16]


def _derived_seed(*parts) -> int:
    tag = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=4).digest(), "little")


@dataclass
class TreeNode:
    id: str
    parent_id: str | None
    step_index: int
    latent: np.ndarray
    provenance: dict
    steered_features: np.ndarray | None = None  # token grid for steer nodes

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "parent": self.parent_id,
            "step_index": self.step_index,
            "provenance": self.provenance,
        }


def _file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(root.rglob("*")) if root.is_dir() else [root]:
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


class Session:
    """One generation tree bound to a model checkpoint and a decoder checkpoint."""

    def __init__(self, model_path: str, decoder_path: str, seed: int):
        try:
            self.model: DiffusionModel = load_checkpoint(model_path)
            self.decoder: MBDecoder = load_decoder(decoder_path)
        except (OSError, ValueError, KeyError) as exc:
            raise TreeError(f"cannot load checkpoints: {exc}") from exc
        meta = json.loads((Path(decoder_path) / "model.json").read_text())
        if meta["config"]["in_channels"] != self.model.cfg.dim:
            raise TreeError(
                f"decoder expects {meta['config']['in_channels']}-dim features, model is {self.model.cfg.dim}-dim"
            )
        self.tap_block: int = int(meta.get("tap_block", self.model.cfg.n_blocks - 2))
        self.model_path = str(model_path)
        self.decoder_path = str(decoder_path)
        self.model_hash = _file_hash(model_path)
        self.decoder_hash = _file_hash(decoder_path)
        self.seed = int(seed)
        self.nodes: dict[str, TreeNode] = {}
        self.lock = threading.Lock()
        self._preview_cache: dict[tuple, bytes] = {}
        root_latent = self._root_latent()
        prov = {"kind": "root", "seed": self.seed}
        rid = _node_id(None, prov, root_latent)
        self.root_id = rid
        self.nodes[rid] = TreeNode(rid, None, self.model.schedule.T, root_latent, prov)
        self.session_id = hashlib.sha256(
            f"{self.model_hash}/{self.decoder_hash}/{self.seed}".encode()
        ).hexdigest()[:12]

    # -- derivations ---------------------------------------------------------

    def _root_latent(self) -> np.ndarray:
        c = self.model.cfg
        return stream(self.seed, "root").standard_normal((c.frames, c.height, c.width, c.channels)).astype(np.float32)

    def node(self, node_id: str) -> TreeNode:
        if node_id not in self.nodes:
            raise TreeError(f"unknown node {node_id}")
        return self.nodes[node_id]

    def _add(self, node: TreeNode) -> TreeNode:
        existing = self.nodes.get(node.id)
        if existing is not None:
            return existing
        self.nodes[node.id] = node
        self.check_invariants()
        return node

    def _denoise_latent(self, parent: TreeNode, steps: int, sampler: str, seed: int) -> np.ndarray:
        target = parent.step_index - steps
        if steps < 1 or target < 0:
            raise TreeError(f"cannot denoise {steps} steps from step {parent.step_index}")
        grid = list(range(parent.step_index, target - 1, -1))
        override = None
        window = 1
        if parent.provenance.get("kind") == "steer" and parent.steered_features is not None:
            cfg = SteerConfig.from_json(parent.provenance["spec"]["cfg"])
            override = (cfg.block, parent.steered_features)
            window = cfg.window if cfg.mode == "steer_window" else 1
        out, _ = run_sampler(
            self.model,
            parent.latent[None],
            grid,
            sampler,
            seed,
            sample_ids=[0],
            override=override,
            override_window=window,
        )
        return out[0]

    def denoise(self, node_id: str, steps: int, sampler: str = "ode") -> TreeNode:
        with self.lock:
            parent = self.node(node_id)
            seed = _derived_seed(self.seed, "denoise", node_id, steps, sampler)
            latent = self._denoise_latent(parent, steps, sampler, seed)
            prov = {"kind": "denoise", "steps": int(steps), "sampler": sampler, "seed": seed}
            nid = _node_id(parent.id, prov, latent)
            return self._add(TreeNode(nid, parent.id, parent.step_index - steps, latent, prov))

    def renoise(self, node_id: str, t_p: int, count: int, seed: int) -> list[TreeNode]:
        with self.lock:
            parent = self.node(node_id)
            if not 0 <= t_p <= parent.step_index:
                raise TreeError(f"renoise target step {t_p} outside [0, {parent.step_index}]")
            clean = self._clean_estimate(parent)
            children = []
            for i, state in enumerate(renoise(clean, t_p, self.model.schedule, seed, count)):
                prov = {"kind": "renoise", "t_p": int(t_p), "seed": int(seed), "index": i}
                nid = _node_id(parent.id, prov, state.x)
                children.append(self._add(TreeNode(nid, parent.id, t_p, state.x, prov)))
            return children

    def _clean_estimate(self, node: TreeNode) -> np.ndarray:
        if node.step_index == 0:
            return node.latent
        state = LatentState(x=node.latent, step_index=node.step_index, schedule=self.model.schedule)
        return predict_x0(self.model, state)

    def _tap(self, node: TreeNode) -> np.ndarray:
        """Feature grid for previews: steered features for steer nodes, else a fresh tap."""
        if node.steered_features is not None:
            return self.model.net.features_to_grid(node.steered_features[None])[0]
        state = LatentState(x=node.latent, step_index=node.step_index, schedule=self.model.schedule)
        return tap_features(self.model, state, self.tap_block).features

    def steer(self, node_id: str, spec: dict) -> tuple[TreeNode, dict]:
        with self.lock:
            parent = self.node(node_id)
            result, target, cfg = self._run_steer(parent, spec)
            prov = {"kind": "steer", "spec": {"construction": spec["construction"], "cfg": cfg.to_json(), "seed": int(spec.get("seed", 0))}}
            nid = _node_id(parent.id, prov, parent.latent)
            tokens = self.model.net.grid_to_tokens(result.features[None])[0]
            node = self._add(
                TreeNode(nid, parent.id, parent.step_index, parent.latent.copy(), prov, steered_features=tokens)
            )
            info = {
                "initial_loss": result.initial_loss,
                "final_loss": result.final_loss,
                "trace": result.trace,
                "converged": result.converged,
                "iterations": result.iterations,
            }
            return node, info

    def _run_steer(self, parent: TreeNode, spec: dict):
        cfg_json = dict(spec.get("cfg", {}))
        cfg_json.setdefault("block", self.tap_block)
        cfg_json.setdefault("step", parent.step_index)
        cfg = SteerConfig.from_json({**SteerConfig(block=0, step=0).to_json(), **cfg_json})
        if cfg.step != parent.step_index:
            raise TreeError(f"steer cfg.step {cfg.step} must equal the node step {parent.step_index}")
        if not 0 <= cfg.block < self.model.cfg.n_blocks:
            raise TreeError(f"steer block {cfg.block} out of range")
        state = LatentState(x=parent.latent, step_index=parent.step_index, schedule=self.model.schedule)
        feats = tap_features(self.model, state, cfg.block).features
        preview = self._decode_bundle(feats)["ensemble"]
        target = make_target(preview, spec["construction"], seed=int(spec.get("seed", 0)))
        result = steer(self.decoder, feats, target, cfg)
        return result, target, cfg

    # -- previews --------------------------------------------------------------

    def _decode_bundle(self, feats: np.ndarray) -> dict:
        out = self.decoder.decode(feats)
        slices = {}
        off = 0
        for name, c in self.decoder.cfg.channels:
            slices[name] = slice(off, off + c)
            off += c

        def split(arr):
            return {name: arr[..., sl] for name, sl in slices.items()}

        return {
            "ensemble": split(out["ensemble"]),
            "branches": [split(b) for b in out["branches"]],
        }

    def modalities(self) -> list[str]:
        return [name for name, _ in self.decoder.cfg.channels]

    def preview_array(self, node_id: str, modality: str, which: str) -> np.ndarray:
        node = self.node(node_id)
        if modality not in self.modalities():
            raise TreeError(f"unknown modality {modality!r}")
        decoded = self._decode_bundle(self._tap(node))
        if which == "ensemble":
            maps = decoded["ensemble"]
        elif which.startswith("k") and which[1:].isdigit() and int(which[1:]) < self.decoder.cfg.branches:
            maps = decoded["branches"][int(which[1:])]
        else:
            raise TreeError(f"unknown branch selector {which!r}")
        return _encode_modality(maps[modality], modality)

    def preview_png(self, node_id: str, modality: str, which: str, frame: int | None = None) -> bytes:
        key = (node_id, modality, which, frame)
        if key in self._preview_cache:
            return self._preview_cache[key]
        arr = self.preview_array(node_id, modality, which)
        if frame is not None:
            if not 0 <= frame < arr.shape[0]:
                raise TreeError(f"frame {frame} out of range")
            img = arr[frame]
        else:
            img = np.concatenate(list(arr), axis=1)  # horizontal strip
        data = _to_png(img)
        self._preview_cache[key] = data
        return data

    # -- invariants / replay ------------------------------------------------------

    def check_invariants(self) -> None:
        for node in self.nodes.values():
            if node.parent_id is None:
                continue
            parent = self.nodes[node.parent_id]
            kind = node.provenance["kind"]
            if kind == "denoise" and not node.step_index < parent.step_index:
                raise TreeError("denoise child must sit strictly below its parent")
            if kind == "renoise" and node.step_index != node.provenance["t_p"]:
                raise TreeError("renoise child must sit at t_p")
            if kind == "steer" and node.step_index != parent.step_index:
                raise TreeError("steer child must share its parent's step")
            seen = {node.id}
            cur = node
            while cur.parent_id is not None:
                if cur.parent_id in seen:
                    raise TreeError("cycle detected")
                seen.add(cur.parent_id)
                cur = self.nodes[cur.parent_id]
            if cur.id != self.root_id:
                raise TreeError("node not connected to root")

    def replay(self, node_id: str) -> np.ndarray:
        """Recompute the node's latent from the root by replaying provenance.

        Steered feature deltas along the chain are re-derived by re-running
        the (deterministic) steering optimization, never read from storage.
        """
        chain = []
        cur = self.node(node_id)
        while cur is not None:
            chain.append(cur)
            cur = self.nodes.get(cur.parent_id) if cur.parent_id else None
        chain.reverse()
        latent = self._root_latent()
        steered: np.ndarray | None = None
        for node in chain:
            prov = node.provenance
            if prov["kind"] == "root":
                pass
            elif prov["kind"] == "denoise":
                parent = self.nodes[node.parent_id]
                replica = TreeNode(
                    parent.id, parent.parent_id, parent.step_index, latent, parent.provenance, steered
                )
                latent = self._denoise_latent(replica, prov["steps"], prov["sampler"], prov["seed"])
                steered = None
            elif prov["kind"] == "renoise":
                parent = self.nodes[node.parent_id]
                pnode = TreeNode(parent.id, parent.parent_id, parent.step_index, latent, parent.provenance)
                clean = self._clean_estimate(pnode)
                states = renoise(clean, prov["t_p"], self.model.schedule, prov["seed"], prov["index"] + 1)
                latent = states[prov["index"]].x
                steered = None
            elif prov["kind"] == "steer":
                parent = self.nodes[node.parent_id]
                replica = TreeNode(parent.id, parent.parent_id, parent.step_index, latent, parent.provenance)
                result, _, _ = self._run_steer(replica, prov["spec"])
                steered = self.model.net.grid_to_tokens(result.features[None])[0]
            else:
                raise TreeError(f"unknown provenance kind {prov['kind']}")
        return latent

    # -- persistence -----------------------------------------------------------------

    def persist(self, directory: str | Path) -> None:
        root = Path(directory)
        (root / "blobs").mkdir(parents=True, exist_ok=True)
        doc = {
            "version": FORMAT_VERSION,
            "session_id": self.session_id,
            "seed": self.seed,
            "model_path": self.model_path,
            "decoder_path": self.decoder_path,
            "model_hash": self.model_hash,
            "decoder_hash": self.decoder_hash,
            "tap_block": self.tap_block,
            "root_id": self.root_id,
            "nodes": {nid: n.to_json() for nid, n in sorted(self.nodes.items())},
        }
        (root / "session.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        for nid, node in self.nodes.items():
            blob.save(root / "blobs" / f"{nid}.dbtn", node.latent)
            if node.steered_features is not None:
                blob.save(root / "blobs" / f"{nid}.steer.dbtn", node.steered_features)
        if self._preview_cache:
            for (nid, modality, which, frame), data in self._preview_cache.items():
                pdir = root / "previews" / nid
                pdir.mkdir(parents=True, exist_ok=True)
                tag = "strip" if frame is None else str(frame)
                (pdir / f"{modality}_{which}_{tag}.png").write_bytes(data)

    @classmethod
    def load(cls, directory: str | Path) -> "Session":
        root = Path(directory)
        doc = json.loads((root / "session.json").read_text())
        if doc["version"] != FORMAT_VERSION:
            raise TreeError(f"unsupported session format version {doc['version']}")
        session = cls(doc["model_path"], doc["decoder_path"], doc["seed"])
        if session.model_hash != doc["model_hash"] or session.decoder_hash != doc["decoder_hash"]:
            raise TreeError("checkpoint contents changed since the session was saved")
        session.nodes = {}
        for nid, nj in doc["nodes"].items():
            latent_path = root / "blobs" / f"{nid}.dbtn"
            if not latent_path.exists():
                raise TreeError(f"missing latent blob for node {nid}")
            steer_path = root / "blobs" / f"{nid}.steer.dbtn"
            session.nodes[nid] = TreeNode(
                id=nid,
                parent_id=nj["parent"],
                step_index=nj["step_index"],
                latent=blob.load(latent_path),
                provenance=nj["provenance"],
                steered_features=blob.load(steer_path) if steer_path.exists() else None,
            )
        session.root_id = doc["root_id"]
        session.session_id = doc["session_id"]
        session.check_invariants()
        return session

    def tree_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "root_id": self.root_id,
            "schedule_T": self.model.schedule.T,
            "modalities": self.modalities(),
            "branches": self.decoder.cfg.branches,
            "nodes": [n.to_json() for _, n in sorted(self.nodes.items())],
        }


def _encode_modality(arr: np.ndarray, modality: str) -> np.ndarray:
    """Map a decoded channel group to displayable float RGB in [0, 1]."""
    if modality == "normals":
        arr = (arr + 1.0) / 2.0
    arr = np.clip(arr, 0.0, 1.0)
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return arr.astype(np.float32)


def _to_png(img: np.ndarray) -> bytes:
    eight = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = BytesIO()
    Image.fromarray(eight, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
