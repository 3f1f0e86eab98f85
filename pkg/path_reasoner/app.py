from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional
import logging
import math
import os

from dotenv import load_dotenv
from fastapi import Depends, FastAPI, HTTPException
from pydantic import BaseModel, Field

from path_reasoner.checkpoint import load_checkpoint
from path_reasoner.dataset import QuestionQuery, Vocabulary, load_kb
from path_reasoner.errors import KnowledgeBaseError, PathReasonerError
from path_reasoner.inference import PredictOptions, PredictionRecord, predict, prediction_record
from path_reasoner.kb_store import KnowledgeBase
from path_reasoner.path_model import ModelParams

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()

app = FastAPI(title="Path Reasoner Answer Service")

# Configuration
KB_PATH = os.getenv("PATH_REASONER_KB")
CHECKPOINT_PATH = os.getenv("PATH_REASONER_CHECKPOINT")
BEAM_WIDTH = int(os.getenv("PATH_REASONER_BEAM_WIDTH", "10"))
USE_PMI = os.getenv("PATH_REASONER_USE_PMI", "false").lower() in ("1", "true", "yes")
PORT = int(os.getenv("PORT", "8010"))

logger.info(f"Path Reasoner Configuration:")
logger.info(f"PATH_REASONER_KB: {KB_PATH}")
logger.info(f"PATH_REASONER_CHECKPOINT: {CHECKPOINT_PATH}")
logger.info(f"PATH_REASONER_BEAM_WIDTH: {BEAM_WIDTH}")
logger.info(f"PATH_REASONER_USE_PMI: {USE_PMI}")


@dataclass
class Engine:
    kb: KnowledgeBase
    params: ModelParams
    vocab: Vocabulary
    options: PredictOptions


@lru_cache(maxsize=1)
def get_engine() -> Engine:
    """Load the KB and checkpoint named in the environment once per process."""
    if not KB_PATH or not CHECKPOINT_PATH:
        raise HTTPException(
            status_code=503,
            detail="PATH_REASONER_KB and PATH_REASONER_CHECKPOINT must be set",
        )
    kb = load_kb(KB_PATH)
    ckpt = load_checkpoint(CHECKPOINT_PATH)
    ckpt.check_compatible(kb, vocabulary_size=len(ckpt.vocabulary))
    logger.info(f"Loaded model from {CHECKPOINT_PATH} for {kb}")
    return Engine(
        kb=kb,
        params=ckpt.params,
        vocab=Vocabulary.from_list(ckpt.vocabulary),
        options=PredictOptions(beam_width=BEAM_WIDTH, use_pmi=USE_PMI),
    )


class PredictRequest(QuestionQuery):
    beam_width: Optional[int] = Field(default=None, ge=1)
    max_hops: Optional[int] = Field(default=None, ge=1)
    use_pmi: Optional[bool] = None


class PathView(BaseModel):
    probability: float
    relations: List[str]
    entities: List[str]


class InspectResponse(BaseModel):
    question: str
    topic_entity: str
    answer: Optional[str]
    paths: List[PathView]


def _run(request: PredictRequest, engine: Engine) -> PredictionRecord:
    try:
        e0 = engine.kb.entity_id(request.topic_entity)
    except KnowledgeBaseError:
        raise HTTPException(status_code=404, detail=f"Unknown topic entity: {request.topic_entity}")
    overrides = request.model_dump(include={"beam_width", "max_hops", "use_pmi"}, exclude_none=True)
    options = engine.options.model_copy(update=overrides)
    try:
        prediction = predict(
            engine.params, engine.kb, engine.vocab.encode(request.question), e0, options, engine.vocab
        )
    except PathReasonerError as e:
        logger.error(f"Prediction failed: {str(e)}")
        raise HTTPException(status_code=400, detail=str(e))
    logger.info(f"Answered {request.question!r} from {request.topic_entity}: {prediction.answer}")
    return prediction_record(engine.kb, request.question, e0, prediction)


@app.get("/health")
async def health():
    return {"status": "ok"}


@app.post("/predict", response_model=PredictionRecord)
async def predict_answer(request: PredictRequest, engine: Engine = Depends(get_engine)):
    """Answer one question; same JSON object as the command-line predict output."""
    return _run(request, engine)


@app.post("/inspect-paths", response_model=InspectResponse)
async def inspect_paths(request: PredictRequest, engine: Engine = Depends(get_engine)):
    """Ranked reasoning paths behind the answer, most probable first."""
    record = _run(request, engine)
    return InspectResponse(
        question=record.question,
        topic_entity=record.topic_entity,
        answer=record.answer,
        paths=[
            PathView(probability=math.exp(log_prob), relations=relations, entities=entities)
            for relations, entities, log_prob in record.ranked_paths
        ],
    )


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=PORT)
