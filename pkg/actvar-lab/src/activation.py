"""
Modelo con activación dual
Enrutado de expertos y activación de tokens instalados en las escalas configuradas
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Union

import numpy as np

from .backbone import BlockParams, BlockState, ForwardContext, VarModel
from .checkpoint import load_checkpoint
from .config import ActivationConfig, BackboneConfig
from .errors import ArgumentError, ConfigError
from .experts import (
    ExpertBank, GateParams, RoutingDecision, moe_forward, route, weight_pseudo_labels,
)
from .tensor import Tensor, parameter, reshape
from .token_gate import (
    SelectionDecision, compact_block_forward, extract, reconstruct, select, token_pseudo_labels,
)

logger = logging.getLogger(__name__)


@dataclass
class BlockRecord:
    """Decisiones y pseudo-etiquetas de un bloque en una escala activada"""
    block: int
    scale: int
    batch: int
    length: int
    routing: Optional[RoutingDecision] = None
    selection: Optional[SelectionDecision] = None
    weight_labels: Optional[np.ndarray] = None
    token_labels: Optional[np.ndarray] = None

    def selected_mask(self) -> np.ndarray:
        """Posiciones procesadas por el bloque [B, L]"""
        if self.selection is None:
            return np.ones((self.batch, self.length), dtype=np.int8)
        return self.selection.indicator

    def top_experts(self, count: int = 3) -> np.ndarray:
        """
        Expertos más probables por posición [B, L, count]; -1 en tokens no procesados
        """
        result = -np.ones((self.batch, self.length, count), dtype=np.int64)
        if self.routing is None:
            return result
        probs = self.routing.p_w.data.reshape(self.batch, -1, self.routing.n_experts)
        ranked = np.argsort(-probs, axis=-1, kind="stable")[..., :count]
        if self.selection is None:
            result[:, :, :ranked.shape[-1]] = ranked
        else:
            rows = np.arange(self.batch)[:, None]
            result[rows, self.selection.gather, :ranked.shape[-1]] = ranked
        return result


class ActVarModel(VarModel):
    """
    Estudiante con dispersión dual

    Las FFN se almacenan como bancos de expertos; en escalas no activadas se
    ejecutan completas (equivalentes a la FFN densa).
    """

    def __init__(self, config: BackboneConfig, params: Dict[str, Tensor], activation: ActivationConfig):
        super().__init__(config, params)
        ok, message = activation.validate(steps=self.schedule.steps)
        if not ok:
            raise ConfigError(message)
        if config.ffn_hidden % activation.experts != 0:
            raise ArgumentError(f"ffn_hidden={config.ffn_hidden} no es divisible entre N={activation.experts}")
        self.activation = activation

    def copy(self) -> "ActVarModel":
        params = {name: parameter(t.data, name=name) for name, t in self.params.items()}
        return ActVarModel(self.config, params, self.activation)

    @classmethod
    def load(cls, path: Union[str, Path], config: BackboneConfig,
             activation: ActivationConfig) -> "ActVarModel":
        arrays = load_checkpoint(path)
        return cls(config, {name: parameter(a, name=name) for name, a in arrays.items()}, activation)

    # ------------------------------------------------------------------
    def bank(self, m: int) -> ExpertBank:
        return ExpertBank.from_params(self.params, f'blocks.{m}.ffn.', self.activation.experts)

    def ffn(self, m: int) -> Callable[[Tensor], Tensor]:
        return self.bank(m).dense()

    def router(self, m: int) -> GateParams:
        return GateParams(self.params[f'blocks.{m}.router.w'], self.params[f'blocks.{m}.router.b'])

    def selector(self, m: int) -> GateParams:
        return GateParams(self.params[f'blocks.{m}.selector.w'], self.params[f'blocks.{m}.selector.b'])

    # ------------------------------------------------------------------
    def _run_block(self, m: int, state: BlockState, context: ForwardContext) -> Tensor:
        if not self.activation.is_activated(state.scale_index):
            return super()._run_block(m, state, context)
        return self._activated_block(m, state, context)

    def _routed_ffn(self, m: int, record: BlockRecord,
                    teacher_block: Optional[BlockParams]) -> Callable[[Tensor], Tensor]:
        bank = self.bank(m)
        if not self.activation.route_weights:
            return bank.dense()
        k_w = self.activation.k_experts()
        router = self.router(m)
        bias_mode = self.activation.bias_mode

        def routed(h: Tensor) -> Tensor:
            flat = reshape(h, (-1, h.shape[-1]))
            # el router solo recibe gradiente de sus pérdidas, no de la salida del bloque
            decision = route(router, flat.detach(), k_w)
            record.routing = decision
            if teacher_block is not None:
                record.weight_labels = weight_pseudo_labels(bank, teacher_block.ffn, flat, k_w)
            return reshape(moe_forward(bank, decision, flat, bias_mode), h.shape)

        return routed

    def _activated_block(self, m: int, state: BlockState, context: ForwardContext) -> Tensor:
        x = state.q
        batch, length, _ = x.shape
        record = BlockRecord(block=m, scale=state.scale_index, batch=batch, length=length)
        teacher_block = context.teacher.block(m) if context.teacher is not None else None

        if self.activation.gate_tokens:
            k_t = self.activation.k_tokens(state.scale_index, length)
            if teacher_block is not None:
                record.token_labels = token_pseudo_labels(teacher_block, x, k_t, state.cache, state.scale_index)
            record.selection = select(self.selector(m), x.detach(), k_t)
            compact = extract(x, record.selection)
        else:
            compact = x

        block = replace(self.block(m), ffn=self._routed_ffn(m, record, teacher_block))
        updated = compact_block_forward(compact, block, state.cache, state.scale_index)
        context.records.append(record)
        if record.selection is None:
            return updated
        return reconstruct(x, updated, record.selection)
