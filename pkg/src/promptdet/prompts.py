"""Learnable text and visual prompt modules."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F_

from . import binio
from .exceptions import InputError, LayoutError, ShapeError
from .validation import derive_seed
from .vlm import ClassEmbeddings, DenseFeatureMap, normalize_rows


@dataclass(frozen=True)
class Slot:
    """Placeholder for the i-th prompt token inside a token sequence."""
    index: int


def check_layout(layout):
    front, total = (int(v) for v in layout)
    if front < 0 or total < 0 or front > total:
        raise LayoutError(f"invalid prompt layout (l={front}, m={total}); need 0 <= l <= m")
    return front, total


def build_prompted_sequence(category_tokens, layout):
    """``[p_1..p_l, CAT..., p_{l+1}..p_m]`` with prompts as :class:`Slot` entries."""
    front, total = check_layout(layout)
    return ([Slot(i) for i in range(front)] + list(category_tokens)
            + [Slot(i) for i in range(front, total)])


class TextPrompt(torch.nn.Module):
    """Shared prompt tokens contextualised by a BiLSTM and a ReLU two-layer MLP.

    ``recurrence="bilstm"`` runs one bidirectional LSTM over all ``m`` prompt
    embeddings (position ``i`` sees the forward state over ``q_1..q_i`` and the
    backward state over ``q_i..q_m``). ``recurrence="split"`` runs the forward
    direction over the ``l`` front prompts and the backward direction over the
    back prompts only, handing each side the other side's final state.
    ``use_lstm`` / ``use_mlp`` switch the structure for ablations.
    """

    def __init__(self, token_dim=32, layout=(1, 1), mlp_hidden=None, recurrence="bilstm",
                 use_lstm=True, use_mlp=True, seed=0):
        super().__init__()
        self.layout = check_layout(layout)
        if token_dim % 2:
            raise ShapeError("token_dim must be even (two LSTM directions of token_dim/2)")
        if recurrence not in ("bilstm", "split"):
            raise ValueError(f"unknown recurrence {recurrence!r}")
        self.token_dim = token_dim
        self.recurrence = recurrence
        self.use_lstm = use_lstm
        self.use_mlp = use_mlp
        gen = torch.Generator().manual_seed(derive_seed(seed, "text-prompt") % (2 ** 31))
        m = self.layout[1]
        self.q = torch.nn.Parameter(torch.randn(m, token_dim, generator=gen) * 0.02)
        hidden = token_dim // 2
        self.lstm = torch.nn.LSTM(token_dim, hidden, batch_first=True, bidirectional=True)
        for name, p in self.lstm.named_parameters():
            with torch.no_grad():
                if name.startswith("weight_hh"):
                    # orthogonal per gate block
                    blocks = [torch.nn.init.orthogonal_(torch.empty(hidden, hidden), generator=gen)
                              for _ in range(4)]
                    p.copy_(torch.cat(blocks))
                elif name.startswith("weight_ih"):
                    bound = 1.0 / math.sqrt(hidden)
                    p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
                else:
                    p.zero_()
        mlp_hidden = mlp_hidden or token_dim
        self.mlp = torch.nn.Sequential(torch.nn.Linear(token_dim, mlp_hidden), torch.nn.ReLU(),
                                       torch.nn.Linear(mlp_hidden, token_dim))
        for lin in (self.mlp[0], self.mlp[2]):
            bound = 1.0 / math.sqrt(lin.in_features)
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)

    @property
    def n_prompts(self):
        return self.layout[1]

    def _directions(self):
        """Split the bidirectional LSTM into two single-direction LSTMs sharing weights."""
        h = self.lstm.hidden_size
        out = []
        for suffix in ("", "_reverse"):
            d = torch.nn.LSTM(self.token_dim, h, batch_first=True)
            d.weight_ih_l0 = getattr(self.lstm, f"weight_ih_l0{suffix}")
            d.weight_hh_l0 = getattr(self.lstm, f"weight_hh_l0{suffix}")
            d.bias_ih_l0 = getattr(self.lstm, f"bias_ih_l0{suffix}")
            d.bias_hh_l0 = getattr(self.lstm, f"bias_hh_l0{suffix}")
            out.append(d)
        return out

    def contextualize(self):
        """Recurrent states, ``(m, token_dim)``."""
        m = self.n_prompts
        q = self.q
        if self.recurrence == "bilstm":
            states, _ = self.lstm(q.unsqueeze(0))
            return states[0]
        front = self.layout[0]
        h = self.lstm.hidden_size
        fwd, bwd = self._directions()
        zeros = q.new_zeros(1, h)
        if front:
            f_states = fwd(q[:front].unsqueeze(0))[0][0]
            f_last = f_states[-1:]
        else:
            f_states, f_last = q.new_zeros(0, h), zeros
        if m - front:
            b_states = bwd(q[front:].flip(0).unsqueeze(0))[0][0].flip(0)
            b_first = b_states[:1]
        else:
            b_states, b_first = q.new_zeros(0, h), zeros
        front_part = torch.cat([f_states, b_first.expand(front, h)], dim=1)
        back_part = torch.cat([f_last.expand(m - front, h), b_states], dim=1)
        return torch.cat([front_part, back_part], dim=0)

    def forward(self):
        """Prompt embeddings ``h_1..h_m`` as an ``(m, token_dim)`` tensor."""
        if self.n_prompts == 0:
            return self.q
        x = self.contextualize() if self.use_lstm else self.q
        return self.mlp(x) if self.use_mlp else x

    def warm_start(self, targets, steps=300, lr=1e-2):
        """Fit the prompt outputs to ``targets`` (m, token_dim) by mean squared error.

        Used to start adaptation from a hand-written template's context words.
        Returns the final error.
        """
        targets = torch.as_tensor(targets, dtype=self.q.dtype).detach()
        if targets.shape != (self.n_prompts, self.token_dim):
            raise ShapeError(f"warm-start targets {tuple(targets.shape)} for {self.n_prompts} prompts")
        if self.n_prompts == 0:
            return 0.0
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        for _ in range(steps):
            loss = F_.mse_loss(self(), targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            return F_.mse_loss(self(), targets).item()

    def save_tensors(self, prefix="prompt.text."):
        return {prefix + k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}


class VisualPrompt(torch.nn.Module):
    """Projection-free cross-attention from pixels to class embeddings, then an
    affine map of ``[F, F~]`` back to width D.

    ``init="identity"`` starts as ``F' = F``; ``init="uniform"`` uses fan-in
    uniform weights.
    """

    def __init__(self, dim=32, init="identity", activation=None, seed=0):
        super().__init__()
        self.dim = dim
        self.mlp = torch.nn.Linear(2 * dim, dim)
        self.activation = activation
        self.init = init
        gen = torch.Generator().manual_seed(derive_seed(seed, "visual-prompt") % (2 ** 31))
        with torch.no_grad():
            if init == "identity":
                self.mlp.weight.zero_()
                self.mlp.weight[:, :dim] = torch.eye(dim)
                self.mlp.bias.zero_()
            elif init == "uniform":
                bound = 1.0 / math.sqrt(2 * dim)
                self.mlp.weight.uniform_(-bound, bound, generator=gen)
                self.mlp.bias.uniform_(-bound, bound, generator=gen)
            else:
                raise ValueError(f"unknown init {init!r}")

    def attention(self, feats, keys):
        return torch.softmax(feats @ keys.T / math.sqrt(keys.shape[1]), dim=-1)

    def forward(self, feats, keys, values):
        """``feats`` (..., P, D); ``keys``/``values`` (|C|, D)."""
        attended = self.attention(feats, keys) @ values
        out = self.mlp(torch.cat([feats, attended], dim=-1))
        if self.activation == "relu":
            out = F_.relu(out)
        return out

    def save_tensors(self, prefix="prompt.visual."):
        return {prefix + k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}


def prompted_sequence_embeddings(encoder, category_tokens, layout, h):
    """Token-embedding sequence with the prompt slots filled from ``h``."""
    te = encoder.text_encoder
    rows = []
    for item in build_prompted_sequence(category_tokens, layout):
        rows.append(h[item.index] if isinstance(item, Slot) else te.embed_tokens([item])[0])
    return torch.stack(rows)


def text_prompt_forward(prompt, category_tokens, encoder, normalize=None):
    """Embedding row of one category under the text prompt."""
    return prompted_class_embeddings(prompt, encoder, [category_tokens], normalize=normalize)


def prompted_class_embeddings(prompt, encoder, token_sequences, names=(), normalize=None):
    normalize = encoder.normalize if normalize is None else normalize
    vocab = len(encoder.tokenizer)
    for seq in token_sequences:
        if any(t < 0 or t >= vocab for t in seq):
            raise InputError(f"token index outside vocabulary: {list(seq)}")
    te = encoder.text_encoder
    if prompt is not None and prompt.n_prompts:
        h = prompt()
        seqs = [prompted_sequence_embeddings(encoder, seq, prompt.layout, h) for seq in token_sequences]
    else:
        seqs = [te.embed_tokens(seq) for seq in token_sequences]
    emb = te.pool(seqs)
    if normalize and len(token_sequences):
        emb = normalize_rows(emb)
    return ClassEmbeddings(emb, tuple(names), normalize)


def visual_prompt_forward(prompt, F, T_prompted, T_plain):
    """Semantic-aware pixel embeddings ``F'`` as a :class:`DenseFeatureMap`."""
    if tuple(T_prompted.names) != tuple(T_plain.names):
        raise InputError("prompted and plain class embeddings cover different category orders")
    if len(T_prompted) != len(T_plain):
        raise InputError("prompted and plain class embeddings differ in length")
    if not (F.dim == T_prompted.dim == T_plain.dim == prompt.dim):
        raise ShapeError("feature, key, value and prompt widths must all equal D")
    return DenseFeatureMap(prompt(F.values, T_prompted.values, T_plain.values), F.grid, F.stride)


def save_prompts(path, text_prompt, visual_prompt, meta):
    tensors = {}
    if text_prompt is not None:
        tensors.update(text_prompt.save_tensors())
    if visual_prompt is not None:
        tensors.update(visual_prompt.save_tensors())
    binio.write_checkpoint(path, tensors, {"prompts": meta})


def load_prompts(path):
    """Return ``(text_prompt or None, visual_prompt or None, meta)``."""
    tensors, meta = binio.read_checkpoint(path)
    meta = meta["prompts"]
    tp = vp = None
    if meta.get("text"):
        t = meta["text"]
        tp = TextPrompt(t["token_dim"], tuple(t["layout"]), t.get("mlp_hidden"), t["recurrence"],
                        t["use_lstm"], t["use_mlp"])
        tp.load_state_dict({k[len("prompt.text."):]: torch.from_numpy(v.copy())
                            for k, v in tensors.items() if k.startswith("prompt.text.")})
    if meta.get("visual"):
        v = meta["visual"]
        vp = VisualPrompt(v["dim"], "identity", v.get("activation"))
        vp.load_state_dict({k[len("prompt.visual."):]: torch.from_numpy(a.copy())
                            for k, a in tensors.items() if k.startswith("prompt.visual.")})
    return tp, vp, meta
