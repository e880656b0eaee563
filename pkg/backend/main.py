from fastapi import FastAPI
from routers.fuse import router as fuse_router
from routers.render import router as render_router
from routers.diffusion import router as diffusion_router

app = FastAPI(title="CanonFuse API")

@app.get('/')
def root():
    return {'status':'ok','message':'CanonFuse Backend'}

app.include_router(fuse_router,prefix='/fuse')
app.include_router(render_router,prefix='/render')
app.include_router(diffusion_router,prefix='/diffusion')
