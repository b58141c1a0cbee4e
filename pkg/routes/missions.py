from fastapi import APIRouter, HTTPException, status
from fastapi.concurrency import run_in_threadpool
from models.schemas import (
    MetricsOut,
    MissionFile,
    RunRequest,
    RunResponse,
    ValidationReport,
    ViolationEventOut,
)
from utils.errors import InspectionError, MissionSchemaError, MissionValidationError
from utils.mission_io import (
    faults_from_specs,
    mission_from_model,
    status_counts,
    validation_report,
    violation_dict,
    violation_out,
)
from utils.simulation import compute_metrics, detect_violation, run_mission
import logging

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/missions", tags=["missions"])


@router.post("/validate", response_model=ValidationReport)
async def validate_mission(mission: MissionFile):
    """Geometric feasibility report for a mission (always 200 when the schema is valid)"""
    try:
        return validation_report(mission)
    except InspectionError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))


def _simulate(request: RunRequest) -> RunResponse:
    mission = mission_from_model(request.mission)
    faults = None
    if request.faults is not None:
        faults = faults_from_specs(request.faults, mission.vehicle.n_u)
    log = run_mission(mission, faults=faults, max_time=request.max_time)
    metrics = compute_metrics(log, mission.path, mission.vehicle)
    violation = violation_dict(detect_violation(log, mission.free_space))
    return RunResponse(
        name=mission.name,
        termination=log.termination,
        steps=len(log),
        metrics=MetricsOut(**metrics.as_dict()),
        violation=ViolationEventOut(**violation) if violation else None,
        status_counts=status_counts(log),
    )


@router.post("/run", response_model=RunResponse)
async def run(request: RunRequest):
    """Closed-loop simulation of a mission; blocks until the run terminates"""
    try:
        return await run_in_threadpool(_simulate, request)
    except MissionValidationError as e:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail={
                "message": str(e),
                "violations": [violation_out(v).model_dump() for v in e.violations],
            },
        )
    except MissionSchemaError as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail={"message": str(e), "fields": e.fields},
        )
    except InspectionError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except Exception as e:
        logger.exception("run failed")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Error running mission: {str(e)}"
        )
